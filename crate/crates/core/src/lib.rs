//! Shared numerics for paired multi-modality diffusion: offset-noise
//! schedules, frequency filters, coupled samplers, phantom data and the
//! statistics used for evaluation. Neural networks live in `pairdiff-nets`.

pub mod data;
pub mod diffusion;
pub mod embedding;
mod error;
pub mod oracle;
pub mod sampler;
pub mod spectral;
pub mod stats;

pub use error::{Error, Result};

/// Single-channel image, indexed `[row, col]`.
pub type Image = ndarray::Array2<f64>;
