use std::path::Path;

/// Failures of the command-line front end, grouped by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric divergence: {0}")]
    Divergence(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: &Path, err: std::io::Error) -> Self {
        CliError::Data(format!("{}: {err}", path.display()))
    }

    /// 2 for configuration errors, 3 for data errors, 4 for divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Divergence(_) => 4,
        }
    }
}

impl From<kao_core::Error> for CliError {
    fn from(e: kao_core::Error) -> Self {
        use kao_core::Error as E;
        match e {
            E::Config(_) => CliError::Config(e.to_string()),
            E::Divergence { .. } | E::NonFinite(_) => CliError::Divergence(e.to_string()),
            E::Shape(_) | E::Domain(_) => CliError::Data(e.to_string()),
        }
    }
}
