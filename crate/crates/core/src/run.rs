//! Experiment drivers shared by the command-line tool and the tests.
//!
//! Each driver derives its randomness from the master seed through a fixed
//! substream, so two runs with the same config and seed are bit-identical
//! and stages can be rerun independently.

use crate::analysis::{
    activation_profile, compare_strategies, minmax_quantize, per_timestep_mse, ActivationProfile,
    CompareOptions, Comparison, CurveMode, QualityReport, TimestepErrorCurve,
};
use crate::calib::{build_calibration_set, qdiffusion_calibrate, CalibReport, CalibrationSet};
use crate::diffusion::{ddim_sample, train, Denoiser, TrainReport, Trajectory};
use crate::error::Result;
use crate::io::config::RunConfig;
use crate::netcore::{Arch, NoisePredictor, Rng, Tensor};
use crate::quant::QuantizedModel;

const TRAIN_DATA: u64 = 0;
const TRAIN_INIT: u64 = 1;
const TRAIN_STEPS: u64 = 2;
const CALIBRATE: u64 = 3;
const SAMPLE: u64 = 4;
const REFERENCE: u64 = 5;
const CURVE: u64 = 6;
const PROFILE: u64 = 7;
const COMPARE: u64 = 8;

fn stream(seed: u64, id: u64) -> Rng {
    Rng::new(seed).substream(id)
}

/// The training points of a run.
pub fn training_data(cfg: &RunConfig, seed: u64) -> Tensor<f32> {
    cfg.dataset
        .sample(cfg.train_points, &mut stream(seed, TRAIN_DATA))
}

/// Fresh draws from the data distribution used as the reference set when
/// scoring samples.
pub fn reference_points(cfg: &RunConfig, seed: u64) -> Tensor<f32> {
    cfg.dataset
        .sample(cfg.eval_reference, &mut stream(seed, REFERENCE))
}

pub fn train_model(cfg: &RunConfig, seed: u64) -> Result<TrainReport> {
    let schedule = cfg.schedule()?;
    let data = training_data(cfg, seed);
    let model = NoisePredictor::init(Arch::default(), &mut stream(seed, TRAIN_INIT))?;
    train(
        model,
        &data,
        &schedule,
        &cfg.train_config(),
        &mut stream(seed, TRAIN_STEPS),
    )
}

/// Result of [`calibrate_model`]. `report` is `None` for the uncalibrated
/// (`calib.strategy=none`) baseline.
pub struct CalibrationRun {
    pub model: QuantizedModel,
    pub report: Option<CalibReport>,
    pub set: CalibrationSet,
}

/// Quantizes `fp` following `cfg.quant` and calibrates it with the configured
/// strategy.
pub fn calibrate_model(
    fp: &NoisePredictor<f32>,
    cfg: &RunConfig,
    seed: u64,
) -> Result<CalibrationRun> {
    let schedule = cfg.schedule()?;
    let plan = cfg.plan()?;
    let rng = stream(seed, CALIBRATE);
    match cfg.strategy() {
        Some(strategy) => {
            let c = qdiffusion_calibrate(
                fp,
                &schedule,
                &plan,
                &cfg.quant,
                strategy,
                &cfg.calib_options(),
                &rng,
            )?;
            Ok(CalibrationRun {
                model: c.model,
                report: Some(c.report),
                set: c.set,
            })
        }
        None => {
            let set = build_calibration_set(
                fp,
                &schedule,
                &plan,
                cfg.calib_c,
                cfg.calib_n,
                &rng.substream(0),
            )?;
            Ok(CalibrationRun {
                model: minmax_quantize(fp, &cfg.quant, &set.x, &set.t)?,
                report: None,
                set,
            })
        }
    }
}

pub fn sample_model<D: Denoiser + ?Sized>(
    model: &D,
    cfg: &RunConfig,
    seed: u64,
    record: bool,
) -> Result<Trajectory> {
    ddim_sample(
        model,
        &cfg.schedule()?,
        &cfg.plan()?,
        cfg.sample_count,
        &stream(seed, SAMPLE),
        record,
    )
}

pub fn evaluate_samples(
    samples: &Tensor<f32>,
    reference: &Tensor<f32>,
    cfg: &RunConfig,
) -> Result<QualityReport> {
    QualityReport::evaluate(samples, reference, &cfg.dataset.modes())
}

pub fn error_curve<A: Denoiser + ?Sized, B: Denoiser + ?Sized>(
    fp: &A,
    q: &B,
    cfg: &RunConfig,
    seed: u64,
    mode: CurveMode,
) -> Result<TimestepErrorCurve> {
    per_timestep_mse(
        fp,
        q,
        &cfg.schedule()?,
        &cfg.plan()?,
        cfg.mse_batch,
        &stream(seed, CURVE),
        mode,
    )
}

pub fn profile_activations(
    model: &NoisePredictor<f32>,
    cfg: &RunConfig,
    seed: u64,
) -> Result<ActivationProfile> {
    activation_profile(
        model,
        &cfg.schedule()?,
        &cfg.plan()?,
        cfg.profile_batch,
        &stream(seed, PROFILE),
    )
}

pub fn compare_options(cfg: &RunConfig, seed: u64) -> CompareOptions {
    CompareOptions {
        quant: cfg.quant.clone(),
        c: cfg.calib_c,
        n: cfg.calib_n,
        calib: cfg.calib_options(),
        sample_count: cfg.sample_count,
        mse_batch: cfg.mse_batch,
        reference: reference_points(cfg, seed),
        modes: cfg.dataset.modes(),
    }
}

pub fn compare(fp: &NoisePredictor<f32>, cfg: &RunConfig, seed: u64) -> Result<Comparison> {
    compare_strategies(
        fp,
        &cfg.schedule()?,
        &cfg.plan()?,
        &compare_options(cfg, seed),
        &stream(seed, COMPARE),
    )
}
