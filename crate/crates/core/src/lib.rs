//! Granularity-conditioned single-step edge detection in a latent space,
//! together with the boundary-benchmark evaluation pipeline.

pub mod checkpoint;
pub mod codec;
pub mod conditioning;
pub mod dataset;
pub mod denoiser;
pub mod error;
pub mod evaluation;
pub mod granularity;
pub mod imageio;
pub mod inference;
pub mod training;

pub use error::{GedError, Result};
pub use granularity::Granularity;
