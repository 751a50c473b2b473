//! Run configuration shared by every CLI subcommand.
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `dataset` | `gaussians8` | `gaussians8` or `swissroll` |
//! | `T_train` | 1000 | diffusion steps of the forward process |
//! | `beta_start`, `beta_end` | 1e-4, 0.02 | linear noise schedule |
//! | `T_sample` | 100 | sampler iterations |
//! | `eta` | 0 | DDIM stochasticity |
//! | `bits_w`, `bits_a`, `granularity_w`, `override.*` | see [`QuantConfig`] | |
//! | `calib.c` | 5 | calibration interval |
//! | `calib.n` | 256 | samples per selected iteration |
//! | `calib.strategy` | `uniform` | `uniform`, `single-step` or `none` |
//! | `calib.iters` | 5000 | optimizer steps per block and phase |
//! | `seed` | 0 | master seed (`--seed` overrides) |
//! | `train.steps`, `train.batch`, `train.lr`, `train.points` | 20000, 512, 1e-3, 10000 | |
//! | `sample.count` | 1024 | samples drawn by `sample` and `compare-calib` |
//! | `eval.reference` | 4096 | reference points drawn by `eval` |
//! | `mse.batch` | 64 | trajectories for error curves |
//! | `profile.batch` | 1000 | trajectories for activation profiles |
//!
//! The derived calibration-set size `N = n * floor(T_sample / c)` is reported
//! by [`RunConfig::derived_n`] and is not a key.

use super::kv::{parse_kv, parse_value};
use crate::calib::{AdaRoundOptions, CalibOptions, CalibStrategy, LsqOptions, StrategyKind};
use crate::diffusion::{Dataset, NoiseSchedule, SamplerPlan, TrainConfig};
use crate::error::{Error, Result};
use crate::quant::QuantConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: Dataset,
    pub t_train: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub t_sample: usize,
    pub eta: f64,
    pub quant: QuantConfig,
    pub calib_c: usize,
    pub calib_n: usize,
    pub calib_strategy: StrategyKind,
    pub calib_iters: usize,
    pub seed: u64,
    pub train_steps: usize,
    pub train_batch: usize,
    pub train_lr: f64,
    pub train_points: usize,
    pub sample_count: usize,
    pub eval_reference: usize,
    pub mse_batch: usize,
    pub profile_batch: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let tc = TrainConfig::default();
        RunConfig {
            dataset: Dataset::default(),
            t_train: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            t_sample: 100,
            eta: 0.0,
            quant: QuantConfig::default(),
            calib_c: 5,
            calib_n: 256,
            calib_strategy: StrategyKind::Uniform,
            calib_iters: 5000,
            seed: 0,
            train_steps: tc.steps,
            train_batch: tc.batch,
            train_lr: tc.lr,
            train_points: 10000,
            sample_count: 1024,
            eval_reference: 4096,
            mse_batch: 64,
            profile_batch: 1000,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, v) in parse_kv(text)? {
            cfg.apply_key(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply_key(&mut self, k: &str, v: &str) -> Result<()> {
        match k {
            "dataset" => self.dataset = v.parse()?,
            "T_train" => self.t_train = parse_value(k, v)?,
            "beta_start" => self.beta_start = parse_value(k, v)?,
            "beta_end" => self.beta_end = parse_value(k, v)?,
            "T_sample" => self.t_sample = parse_value(k, v)?,
            "eta" => self.eta = parse_value(k, v)?,
            "calib.c" => self.calib_c = parse_value(k, v)?,
            "calib.n" => self.calib_n = parse_value(k, v)?,
            "calib.strategy" => self.calib_strategy = v.parse()?,
            "calib.iters" => self.calib_iters = parse_value(k, v)?,
            "seed" => self.seed = parse_value(k, v)?,
            "train.steps" => self.train_steps = parse_value(k, v)?,
            "train.batch" => self.train_batch = parse_value(k, v)?,
            "train.lr" => self.train_lr = parse_value(k, v)?,
            "train.points" => self.train_points = parse_value(k, v)?,
            "sample.count" => self.sample_count = parse_value(k, v)?,
            "eval.reference" => self.eval_reference = parse_value(k, v)?,
            "mse.batch" => self.mse_batch = parse_value(k, v)?,
            "profile.batch" => self.profile_batch = parse_value(k, v)?,
            "N" | "calib.N" => {
                return Err(Error::Config(format!(
                    "{k:?} is derived from calib.n, calib.c and T_sample and cannot be set"
                )))
            }
            _ => {
                if !self.quant.apply_key(k, v)? {
                    return Err(Error::Config(format!("unknown key {k:?}")));
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_sample < 2 || self.t_sample > self.t_train {
            return Err(Error::Config(format!(
                "T_sample={} must lie in 2..={}",
                self.t_sample, self.t_train
            )));
        }
        if self.calib_c == 0 || self.calib_c > self.t_sample {
            return Err(Error::Config(format!(
                "calib.c={} must lie in 1..={}",
                self.calib_c, self.t_sample
            )));
        }
        let positive = [
            ("calib.n", self.calib_n),
            ("train.batch", self.train_batch),
            ("train.points", self.train_points),
            ("sample.count", self.sample_count),
            ("eval.reference", self.eval_reference),
            ("mse.batch", self.mse_batch),
            ("profile.batch", self.profile_batch),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        for bits in [self.quant.bits_w, self.quant.bits_a] {
            if bits < 2 {
                return Err(Error::Config(format!("bit width {bits} below 2")));
            }
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut lines = vec![
            format!("dataset={}", self.dataset),
            format!("T_train={}", self.t_train),
            format!("beta_start={}", self.beta_start),
            format!("beta_end={}", self.beta_end),
            format!("T_sample={}", self.t_sample),
            format!("eta={}", self.eta),
        ];
        lines.extend(self.quant.render_lines());
        lines.extend([
            format!("calib.c={}", self.calib_c),
            format!("calib.n={}", self.calib_n),
            format!("calib.strategy={}", self.calib_strategy),
            format!("calib.iters={}", self.calib_iters),
            format!("seed={}", self.seed),
            format!("train.steps={}", self.train_steps),
            format!("train.batch={}", self.train_batch),
            format!("train.lr={}", self.train_lr),
            format!("train.points={}", self.train_points),
            format!("sample.count={}", self.sample_count),
            format!("eval.reference={}", self.eval_reference),
            format!("mse.batch={}", self.mse_batch),
            format!("profile.batch={}", self.profile_batch),
        ]);
        let mut s = lines.join("\n");
        s.push('\n');
        s
    }

    /// Size of the uniform-interval calibration set.
    pub fn derived_n(&self) -> usize {
        self.calib_n * (self.t_sample / self.calib_c)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.t_train, self.beta_start, self.beta_end)
    }

    pub fn plan(&self) -> Result<SamplerPlan> {
        SamplerPlan::uniform(self.t_train, self.t_sample, self.eta)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.train_steps,
            batch: self.train_batch,
            lr: self.train_lr,
        }
    }

    pub fn calib_options(&self) -> CalibOptions {
        CalibOptions {
            adaround: AdaRoundOptions {
                iters: self.calib_iters,
                ..Default::default()
            },
            lsq: LsqOptions {
                iters: self.calib_iters,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    /// The calibration strategy named by `calib.strategy`, or `None` for
    /// `none`. Single-step sets take all `N` samples from the first
    /// denoising iteration.
    pub fn strategy(&self) -> Option<CalibStrategy> {
        match self.calib_strategy {
            StrategyKind::Uniform => Some(CalibStrategy::Uniform {
                c: self.calib_c,
                n: self.calib_n,
            }),
            StrategyKind::SingleStep => Some(CalibStrategy::SingleStep {
                iteration: 1,
                count: self.derived_n(),
            }),
            StrategyKind::None => None,
        }
    }
}
