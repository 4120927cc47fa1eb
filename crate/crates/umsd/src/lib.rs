//! Motion style transfer on skeletal animation.
//!
//! The pipeline denoises skeletal motion with a diffusion model whose
//! denoiser mixes bidirectional selective state-space scans with attention,
//! conditioned on a two-stream (content + style) attention module. The crate
//! also ships a synthetic stylised-gait generator, a training loop with
//! from-scratch reverse-mode gradients, and distribution metrics for
//! evaluating transfers. The `umsd` binary exposes the whole flow as
//! subcommands: `gen-data`, `train`, `transfer`, `eval`, `inspect`.

pub mod attention;
pub mod cli;
pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod io;
pub mod linalg;
pub mod losses;
pub mod mat;
pub mod metrics;
pub mod motion;
pub mod nn;
pub mod par;
pub mod quat;
pub mod skeleton;
pub mod synth;
pub mod tape;
pub mod train;
pub mod transfer;

pub use error::{Error, Result};
pub use mat::Mat;
