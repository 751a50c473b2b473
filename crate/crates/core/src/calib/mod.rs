//! Timestep-aware post-training calibration.

pub mod adaround;
pub mod blocks;
pub mod dataset;
pub mod lsq;
pub mod pipeline;

pub use adaround::{
    adaround_objective, block_mse, reconstruct_weights, AdaRoundOptions, BlockReport, SoftLayer,
};
pub use blocks::{
    block_forward, capture_block_data, partition_blocks, BlockData, BlockKind, ReconstructionBlock,
};
pub use dataset::{
    build_calibration_set, build_for_strategy, build_single_step_set, selected_iterations,
    CalibMeta, CalibStrategy, CalibrationSample, CalibrationSet, StrategyKind,
};
pub use lsq::{
    act_objective, calibrate_activations, frozen_residual_loss, reconstruct_act_steps, ActLayer,
    LsqOptions,
};
pub use pipeline::{
    adaround_reconstruct_block, calibrate_weights, calibrate_with_set, qdiffusion_calibrate,
    CalibOptions, CalibReport, Calibrated,
};
