use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("training diverged at iteration {iter}: loss {loss}")]
    Divergence { iter: usize, loss: f64 },
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
