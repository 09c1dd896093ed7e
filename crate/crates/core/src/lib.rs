//! Kernel-adaptive diffusion inpainting at desk scale.
//!
//! The crate is `no_std` with `alloc`: every module here is pure computation
//! over [`Grid`]s and explicit [`SeededRng`] streams. File formats, the run
//! configuration and the command-line front end live in the `kao` crate.
//!
//! Layout:
//!
//! - [`grid`], [`rng`], [`tape`], [`gradcheck`]: dense arrays, counter-based
//!   randomness, a small reverse-mode tape and the finite-difference harness.
//! - [`schedule`]: the discrete forward process and its closed forms.
//! - [`kernel`]: RBF weights, bandwidth resolution, the structural-variance
//!   map and the kernel-weighted posterior-matching objective.
//! - [`denoiser`]: the token-pyramid mean predictor with conditioning taps.
//! - [`conditioning`]: mask pyramids, latent blending, mask-wise pooling and
//!   the learned region mixer.
//! - [`sampler`]: conditioned and unconditioned reverse processes.
//! - [`trainer`], [`optim`]: the training loop and the AdamW optimizer.
//! - [`scenegen`], [`metrics`]: synthetic scenes and image-quality measures.

#![cfg_attr(not(test), no_std)]
// `!(x > 0.0)` style checks are deliberate: they reject NaN along with the
// out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod conditioning;
pub mod denoiser;
pub mod error;
pub mod gradcheck;
pub mod grid;
pub mod kernel;
pub mod math;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod rng;
pub mod sampler;
pub mod scenegen;
pub mod schedule;
pub mod tape;
pub mod trainer;

pub use error::{Error, Result};
pub use grid::Grid;
pub use rng::SeededRng;
