//! Self-supervised image animation by latent-space navigation.
//!
//! The crate provides a small reverse-mode differentiation core, a learned
//! orthonormal motion dictionary with absolute/relative transfer algebra,
//! dense-flow warping, encoder/generator/discriminator networks, a
//! self-supervised trainer with byte-exact checkpoints, and procedural
//! training data.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod graph;
mod kernels;
pub mod losses;
pub mod model;
pub mod motion;
pub mod nets;
pub mod params;
pub mod tensor;
pub mod trainer;
pub mod warp;

pub use error::{Error, Result};
pub use graph::{finite_diff_check, Gradients, Graph, Var};
pub use tensor::Tensor;

/// Bound the worker pool from the `LIA_THREADS` environment variable.
/// Call once at process start; later calls are ignored.
pub fn configure_threads_from_env() {
    if let Some(n) = std::env::var("LIA_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n >= 1)
    {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}
