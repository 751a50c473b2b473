//! Noise schedule, forward process, simplified-loss training and DDIM
//! sampling.

pub mod data;
pub mod sampler;
pub mod schedule;
pub mod train;

pub use data::Dataset;
pub use sampler::{
    ddim_sample, ddim_sample_from, ddim_update, sampler_noise, Denoiser, SamplerPlan, Trajectory,
};
pub use schedule::NoiseSchedule;
pub use train::{simple_loss, train, LossOutput, TrainConfig, TrainReport};
