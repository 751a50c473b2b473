//! Calibration sets drawn from intermediate denoising inputs.
//!
//! `n` independent full-precision trajectories are run over the sampler plan.
//! Iterations are numbered `1..=T_sample` from the noise end; at every
//! iteration `i` with `i % c == 0` the current model input of each trajectory
//! is recorded together with its timestep. The rows are then permuted with a
//! Fisher–Yates shuffle drawn from `rng.substream(1)`; trajectories use
//! `rng.substream(0)` as the sampler generator.

use std::fmt;
use std::str::FromStr;

use crate::diffusion::{ddim_sample, NoiseSchedule, SamplerPlan};
use crate::error::{Error, Result};
use crate::netcore::{NoisePredictor, Rng, Tensor};

/// Which iterations feed the calibration set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CalibStrategy {
    /// Every `c`-th iteration, `n` trajectories each.
    Uniform { c: usize, n: usize },
    /// A single iteration (1 = pure-noise input), `count` trajectories.
    SingleStep { iteration: usize, count: usize },
}

impl fmt::Display for CalibStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CalibStrategy::Uniform { .. } => f.write_str("uniform"),
            CalibStrategy::SingleStep { .. } => f.write_str("single-step"),
        }
    }
}

/// Strategy names accepted in configs: `uniform`, `single-step`, `none`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum StrategyKind {
    #[default]
    Uniform,
    SingleStep,
    None,
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StrategyKind::Uniform => "uniform",
            StrategyKind::SingleStep => "single-step",
            StrategyKind::None => "none",
        })
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(StrategyKind::Uniform),
            "single-step" => Ok(StrategyKind::SingleStep),
            "none" => Ok(StrategyKind::None),
            other => Err(Error::Config(format!(
                "unknown calibration strategy {other:?}"
            ))),
        }
    }
}

/// One intermediate denoising input.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationSample {
    pub x: Tensor<f32>,
    pub t: usize,
    /// Reserved for conditional models; always `None` here.
    pub condition: Option<Tensor<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibMeta {
    pub t_sample: usize,
    /// Sampling interval `c`; for single-step sets, the chosen iteration.
    pub interval: usize,
    /// Samples per selected iteration.
    pub per_step: usize,
    pub total: usize,
    pub seed: u64,
    pub single_step: bool,
}

/// Rows of `x` are model inputs, `t[i]` the matching timestep and
/// `iteration[i]` the 1-based sampler iteration that produced row `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationSet {
    pub x: Tensor<f32>,
    pub t: Vec<usize>,
    pub iteration: Vec<usize>,
    pub meta: CalibMeta,
}

/// Number of iterations in `1..=t_sample` divisible by `c`.
pub fn selected_iterations(t_sample: usize, c: usize) -> Vec<usize> {
    (1..=t_sample).filter(|i| i % c == 0).collect()
}

impl CalibrationSet {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn sample(&self, i: usize) -> CalibrationSample {
        CalibrationSample {
            x: self.x.gather_rows(&[i]),
            t: self.t[i],
            condition: None,
        }
    }

    pub fn samples(&self) -> impl Iterator<Item = CalibrationSample> + '_ {
        (0..self.len()).map(|i| self.sample(i))
    }

    /// Splits row indices into an optimization part and a held-out tail of
    /// `round(frac * N)` rows (at least one row stays in the first part).
    pub fn split_holdout(&self, frac: f64) -> (Vec<usize>, Vec<usize>) {
        let n = self.len();
        let held = ((frac * n as f64).round() as usize).min(n.saturating_sub(1));
        let cut = n - held;
        ((0..cut).collect(), (cut..n).collect())
    }

    pub fn subset(&self, idx: &[usize]) -> CalibrationSet {
        CalibrationSet {
            x: self.x.gather_rows(idx),
            t: idx.iter().map(|&i| self.t[i]).collect(),
            iteration: idx.iter().map(|&i| self.iteration[i]).collect(),
            meta: CalibMeta {
                total: idx.len(),
                ..self.meta.clone()
            },
        }
    }
}

fn collect(
    fp_model: &NoisePredictor<f32>,
    schedule: &NoiseSchedule,
    plan: &SamplerPlan,
    iterations: &[usize],
    trajectories: usize,
    rng: &Rng,
) -> Result<(Tensor<f32>, Vec<usize>, Vec<usize>)> {
    let traj = ddim_sample(
        fp_model,
        schedule,
        plan,
        trajectories,
        &rng.substream(0),
        true,
    )?;
    let mut parts = Vec::with_capacity(iterations.len());
    let mut t = Vec::new();
    let mut iters = Vec::new();
    for &i in iterations {
        let (ti, x) = &traj.states[i - 1];
        parts.push(x.clone());
        t.extend(std::iter::repeat_n(*ti, trajectories));
        iters.extend(std::iter::repeat_n(i, trajectories));
    }
    let x = Tensor::vstack(&parts)?;
    let mut order: Vec<usize> = (0..t.len()).collect();
    rng.substream(1).shuffle(&mut order);
    Ok((
        x.gather_rows(&order),
        order.iter().map(|&k| t[k]).collect(),
        order.iter().map(|&k| iters[k]).collect(),
    ))
}

/// Uniform-interval calibration set: `n * floor(T_sample / c)` rows.
pub fn build_calibration_set(
    fp_model: &NoisePredictor<f32>,
    schedule: &NoiseSchedule,
    plan: &SamplerPlan,
    c: usize,
    n: usize,
    rng: &Rng,
) -> Result<CalibrationSet> {
    let t_sample = plan.len();
    if c == 0 || c > t_sample {
        return Err(Error::Param(format!(
            "calibration interval c={c} must lie in 1..={t_sample}"
        )));
    }
    if n == 0 {
        return Err(Error::Param("calibration needs n >= 1 per step".into()));
    }
    let iterations = selected_iterations(t_sample, c);
    let (x, t, iteration) = collect(fp_model, schedule, plan, &iterations, n, rng)?;
    Ok(CalibrationSet {
        meta: CalibMeta {
            t_sample,
            interval: c,
            per_step: n,
            total: t.len(),
            seed: rng.seed(),
            single_step: false,
        },
        x,
        t,
        iteration,
    })
}

/// All rows taken at one sampler iteration.
pub fn build_single_step_set(
    fp_model: &NoisePredictor<f32>,
    schedule: &NoiseSchedule,
    plan: &SamplerPlan,
    iteration: usize,
    count: usize,
    rng: &Rng,
) -> Result<CalibrationSet> {
    let t_sample = plan.len();
    if iteration == 0 || iteration > t_sample {
        return Err(Error::Param(format!(
            "iteration {iteration} outside 1..={t_sample}"
        )));
    }
    if count == 0 {
        return Err(Error::Param("calibration needs at least one sample".into()));
    }
    let (x, t, its) = collect(fp_model, schedule, plan, &[iteration], count, rng)?;
    Ok(CalibrationSet {
        meta: CalibMeta {
            t_sample,
            interval: iteration,
            per_step: count,
            total: t.len(),
            seed: rng.seed(),
            single_step: true,
        },
        x,
        t,
        iteration: its,
    })
}

/// Dispatches on a [`CalibStrategy`].
pub fn build_for_strategy(
    fp_model: &NoisePredictor<f32>,
    schedule: &NoiseSchedule,
    plan: &SamplerPlan,
    strategy: CalibStrategy,
    rng: &Rng,
) -> Result<CalibrationSet> {
    match strategy {
        CalibStrategy::Uniform { c, n } => {
            build_calibration_set(fp_model, schedule, plan, c, n, rng)
        }
        CalibStrategy::SingleStep { iteration, count } => {
            build_single_step_set(fp_model, schedule, plan, iteration, count, rng)
        }
    }
}
