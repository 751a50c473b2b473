//! Diagnostics: per-timestep quantization error, activation ranges, sample
//! quality and calibration-strategy comparison.

pub mod compare;
pub mod mse;
pub mod profile;
pub mod quality;

pub use compare::{
    compare_strategies, minmax_quantize, parse_comparison, CompareOptions, CompareRow, Comparison,
    StrategyResult, COMPARE_HEADER,
};
pub use mse::{per_timestep_mse, spearman, CurveMode, TimestepErrorCurve, CURVE_HEADER};
pub use profile::{
    activation_profile, range_stats, ActivationProfile, LayerAggregate, RangeStats, PROFILE_HEADER,
};
pub use quality::{energy_distance, mode_coverage, QualityReport, QUALITY_HEADER};
