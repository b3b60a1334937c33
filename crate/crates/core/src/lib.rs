//! Feedforward generative model for handwritten digits.
//!
//! Training is a single statistical pass: a position-dependent 4×4 block PCA
//! whitens each 16×16 image, the resulting 16 DC projections are whitened again
//! by a second PCA, and a random forest learns to predict the block AC
//! projections from the DC map. Synthesis runs the chain backwards from a
//! Gaussian latent vector with outlier rejection.

pub mod cli;
pub mod dataset;
pub mod error;
pub mod forest;
pub mod image;
pub mod linalg;
pub mod model;
pub mod pca;
mod persist;
pub mod sampler;
pub mod stage1;

pub use error::{Error, Result};
