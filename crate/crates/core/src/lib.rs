//! Multi-resolution diffusion denoiser with time-dependent layer normalization.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: dense tensors and a reverse-mode computation graph.
//! - [`diffusion`]: noise schedule, forward noising, ancestral sampler, guidance.
//! - [`conditioning`]: sinusoidal time embedding, TD-LN and adaLN-Zero.
//! - [`blocks`]: Transformer and ConvNeXt blocks, GeGLU, patchify, cascade upsampling.
//! - [`network`]: the R-branch feature-cascade denoiser, variant registry and
//!   analytic parameter counting.
//! - [`training`]: multi-scale loss, AdamW, datasets, training loop, checkpoints.
//! - [`gradsuite`]: finite-difference checks over ops, blocks and a small network.
//! - [`analysis`]: PCA of modulation trajectories and image grids.
//! - [`cli`]: the `dimr` command-line front end.

pub mod analysis;
pub mod blocks;
pub mod cli;
pub mod conditioning;
pub mod diffusion;
pub mod error;
pub mod gradsuite;
pub mod network;
pub mod numerics;
pub mod params;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{Float, Graph, Tensor, Var};
