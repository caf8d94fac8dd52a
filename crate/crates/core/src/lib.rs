//! Distributional super-resolution of 3-D velocity fields.
//!
//! The crate trains a volumetric network `h` so that `h(X + eps)`, with `eps`
//! drawn from a chosen noise law *before* the network is applied, matches the
//! conditional distribution of a high-resolution target given a low-resolution
//! input. Training minimizes an energy-score loss (a strictly proper scoring
//! rule), which lets the stochastic ensemble `h(X + eps_1), ..., h(X + eps_m)`
//! learn distributional structure that a pointwise L2 fit cannot, and in
//! particular extrapolates better outside the training domain.
//!
//! Modules:
//! - [`diffcore`]: tensors, reverse-mode autodiff, gradient checking, tensor file I/O
//! - [`energy`]: energy-score and MSE losses plus a Cramer-distance oracle
//! - [`netzoo`]: MLP and 3-D U-Net parameter containers, init, checkpoints
//! - [`geomdata`]: point clouds, neighborhood patches, voxelization, pyramids,
//!   synthetic flow generation, dataset manifests
//! - [`trainer`]: Adam, noise laws, pre-training and linear-probe/fine-tune loops
//! - [`predictor`]: Monte-Carlo upsampling, shape reconstruction, metrics
//! - [`simlab`]: 1-D-output simulation studies comparing the distributional
//!   estimator against an L2 baseline on extrapolation grids

pub mod diffcore;
pub mod energy;
pub mod geomdata;
pub mod netzoo;
pub mod predictor;
pub mod simlab;
pub mod trainer;
pub mod verify;

mod error;
mod real;

pub use error::{DsrError, Result};
pub use real::{Dtype, Real};

/// Derives an independent sub-seed from a base seed and a stream index
/// (per-stage, per-run, per-epoch...). Mixing follows the splitmix64
/// finalizer so nearby indices give unrelated generator states.
pub fn mix_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
