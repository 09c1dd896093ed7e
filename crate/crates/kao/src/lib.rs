//! File formats, run configuration and commands for kernel-adaptive diffusion
//! inpainting; the numerics live in `kao-core`.
//!
//! - [`pnm`]: bit-exact P5/P6 images and binary masks.
//! - [`checkpoint`]: model, optimizer state and loss history in one file.
//! - [`config`]: flat `key = value` run configuration.
//! - [`commands`]: `gen-data`, `train`, `inpaint`, `eval` and `figures`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod pnm;

pub use config::RunConfig;
pub use error::{CliError, Result};
