//! Video diffusion engine: continuous-time Gaussian diffusion, a factorized
//! space-time U-Net, ancestral and predictor-corrector samplers with
//! classifier-free and reconstruction guidance, and a closed-form Gaussian
//! denoiser for checking all of it.

pub mod autodiff;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod oracle;
pub mod persist;
pub mod pipelines;
pub mod resample;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod train;
pub mod unet;

pub use error::{Error, Result};
pub use tensor::{DType, Real, Tensor};
