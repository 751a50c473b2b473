//! Timestep-aware post-training quantization for small denoising diffusion
//! models: a toy noise predictor, DDIM sampling, fake quantization, block-wise
//! calibration over intermediate denoising inputs, and diagnostics.

pub mod analysis;
pub mod calib;
pub mod cli;
pub mod diffusion;
pub mod error;
pub mod io;
pub mod netcore;
pub mod quant;
pub mod run;

pub use error::{CheckpointError, Error, Result};
