//! View-invariant adversarial perturbations on a procedurally rendered
//! multi-view dataset.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`net`]: dense arrays and the fixed CNN with a hand-written
//!   reverse pass (gradients w.r.t. inputs and weights).
//! - [`render`] and [`dataset`]: a small software rasterizer and the seeded
//!   multi-view dataset built from it.
//! - [`classifier`]: initialization, SGD-with-momentum training, clean metrics.
//! - [`attacks`]: FGSM, BIM and VIAP (untargeted and targeted).
//! - [`eval`] and [`stats`]: the epsilon sweep, report emission, Welch t-tests.
//! - [`config`], [`cli`] and [`verify`]: run configuration, the `viap` binary's
//!   subcommands, and its built-in self-checks.

pub mod attacks;
pub mod classifier;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod net;
pub mod render;
pub mod stats;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use net::{Architecture, ModelParams};
pub use tensor::Tensor;
