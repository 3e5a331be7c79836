//! Candle networks for coupled multi-modal diffusion: the controlled
//! spectral filter, timestep-aware CBAM, the per-modality denoisers and the
//! joint trainer.

mod error;
pub mod cbam;
pub mod denoiser;
pub mod experiment;
pub mod filter;
pub mod gradcheck;
pub mod model_set;
pub mod optim;
pub mod params;
pub mod perceptual;
pub mod segmenter;
pub mod trainer;

pub use error::{Error, Result};
