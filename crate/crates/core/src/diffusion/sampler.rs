//! Deterministic (eta = 0) and stochastic DDIM sampling over a sub-sampled
//! step plan.
//!
//! One reverse step from `t` to the next planned timestep `p` (with
//! `alpha_bar(0) = 1` after the last step) is
//!
//! ```text
//! x0_hat = (x_t - sqrt(1 - ab_t) eps) / sqrt(ab_t)
//! sigma² = eta² (1 - ab_p) / (1 - ab_t) (1 - ab_t / ab_p)
//! x_p    = sqrt(ab_p) x0_hat + sqrt(1 - ab_p - sigma²) eps + sigma z
//! ```
//!
//! For consecutive steps `sigma²/eta²` is exactly the posterior variance of
//! the forward process, and it vanishes on the final step.

use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::netcore::{Arch, NoisePredictor, Rng, Tensor};

/// Anything that predicts noise for a batch of states at one timestep.
pub trait Denoiser {
    fn data_dim(&self) -> usize;
    fn predict(&self, x: &Tensor<f32>, t: usize) -> Result<Tensor<f32>>;

    /// Network topology, when the denoiser is one of the toolkit's networks.
    fn arch(&self) -> Option<&Arch> {
        None
    }
}

impl Denoiser for NoisePredictor<f32> {
    fn data_dim(&self) -> usize {
        self.arch().data_dim
    }

    fn predict(&self, x: &Tensor<f32>, t: usize) -> Result<Tensor<f32>> {
        self.forward(x, &[t])
    }

    fn arch(&self) -> Option<&Arch> {
        Some(NoisePredictor::arch(self))
    }
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn data_dim(&self) -> usize {
        (**self).data_dim()
    }

    fn predict(&self, x: &Tensor<f32>, t: usize) -> Result<Tensor<f32>> {
        (**self).predict(x, t)
    }

    fn arch(&self) -> Option<&Arch> {
        (**self).arch()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerPlan {
    steps: Vec<usize>,
    pub eta: f64,
}

impl SamplerPlan {
    pub fn new(steps: Vec<usize>, t_train: usize, eta: f64) -> Result<Self> {
        if steps.len() < 2 {
            return Err(Error::Param("sampler plan needs at least 2 steps".into()));
        }
        if steps[0] != t_train || *steps.last().unwrap() != 1 {
            return Err(Error::Param(format!(
                "plan must run from {t_train} down to 1, got {} .. {}",
                steps[0],
                steps.last().unwrap()
            )));
        }
        if steps.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Param("plan steps must strictly decrease".into()));
        }
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(Error::Param(format!("eta must be >= 0, got {eta}")));
        }
        Ok(SamplerPlan { steps, eta })
    }

    /// `t_sample` timesteps evenly spaced from `t_train` down to 1.
    pub fn uniform(t_train: usize, t_sample: usize, eta: f64) -> Result<Self> {
        if t_sample < 2 || t_sample > t_train {
            return Err(Error::Param(format!(
                "T_sample must lie in 2..={t_train}, got {t_sample}"
            )));
        }
        let span = (t_train - 1) as f64 / (t_sample - 1) as f64;
        let steps = (0..t_sample)
            .map(|i| (t_train as f64 - span * i as f64).round() as usize)
            .collect();
        Self::new(steps, t_train, eta)
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Timestep reached after iteration `i` (0-based), 0 after the last.
    pub fn next_t(&self, i: usize) -> usize {
        self.steps.get(i + 1).copied().unwrap_or(0)
    }
}

/// Batched sampling record. `states[i]` is the model input at iteration `i`
/// (timestep `plan.steps()[i]`), noise end first.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<(usize, Tensor<f32>)>,
    pub final_sample: Tensor<f32>,
}

/// Per-sample randomness: sample `j` draws its initial noise from
/// `rng.substream(j)` and its step-`i` noise from
/// `rng.substream(j).substream(i)`. Results therefore do not depend on how the
/// batch is split.
fn initial_noise(rng: &Rng, ids: &[u64], dim: usize) -> Tensor<f32> {
    let mut data = Vec::with_capacity(ids.len() * dim);
    for &id in ids {
        let mut r = rng.substream(id);
        data.extend((0..dim).map(|_| r.normal() as f32));
    }
    Tensor::new(vec![ids.len(), dim], data).expect("noise shape")
}

fn step_noise(rng: &Rng, ids: &[u64], iter: usize, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(ids.len() * dim);
    for &id in ids {
        let mut r = rng.substream(id).substream(iter as u64);
        out.extend((0..dim).map(|_| r.normal()));
    }
    out
}

/// Applies one reverse update to `x` given predicted noise `eps`.
pub fn ddim_update(
    schedule: &NoiseSchedule,
    t: usize,
    t_prev: usize,
    eta: f64,
    x: &Tensor<f32>,
    eps: &Tensor<f32>,
    noise: Option<&[f64]>,
) -> Result<Tensor<f32>> {
    x.check_same_shape(eps)?;
    let ab_t = schedule.alpha_bar(t);
    let ab_p = schedule.alpha_bar(t_prev);
    let sigma2 = if eta > 0.0 {
        eta * eta * (1.0 - ab_p) / (1.0 - ab_t) * (1.0 - ab_t / ab_p)
    } else {
        0.0
    };
    let c_x0 = ab_p.sqrt();
    let c_eps = (1.0 - ab_p - sigma2).max(0.0).sqrt();
    let sigma = sigma2.sqrt();
    let inv_sqrt_ab = 1.0 / ab_t.sqrt();
    let sqrt_1m_ab = (1.0 - ab_t).sqrt();
    let mut out = Tensor::zeros(x.shape());
    for (k, o) in out.data_mut().iter_mut().enumerate() {
        let xv = x.data()[k] as f64;
        let ev = eps.data()[k] as f64;
        let x0 = (xv - sqrt_1m_ab * ev) * inv_sqrt_ab;
        let mut v = c_x0 * x0 + c_eps * ev;
        if sigma > 0.0 {
            if let Some(z) = noise {
                v += sigma * z[k];
            }
        }
        *o = v as f32;
    }
    Ok(out)
}

/// Continues sampling from iteration `start` with state `x` (the model input
/// at `plan.steps()[start]`). `ids` are the per-row sample ids used to address
/// noise substreams.
#[allow(clippy::too_many_arguments)]
pub fn ddim_sample_from<D: Denoiser + ?Sized>(
    model: &D,
    schedule: &NoiseSchedule,
    plan: &SamplerPlan,
    x: Tensor<f32>,
    start: usize,
    ids: &[u64],
    rng: &Rng,
    record: bool,
) -> Result<Trajectory> {
    if plan.steps()[0] > schedule.t_train() {
        return Err(Error::Param("plan exceeds schedule length".into()));
    }
    if x.rows() != ids.len() {
        return Err(Error::Shape(format!(
            "{} sample ids for {} rows",
            ids.len(),
            x.rows()
        )));
    }
    let dim = model.data_dim();
    let mut states = Vec::new();
    let mut x = x;
    for i in start..plan.len() {
        let t = plan.steps()[i];
        if record {
            states.push((t, x.clone()));
        }
        let eps = model.predict(&x, t)?;
        let t_prev = plan.next_t(i);
        let noise = (plan.eta > 0.0 && t_prev > 0).then(|| step_noise(rng, ids, i, dim));
        x = ddim_update(schedule, t, t_prev, plan.eta, &x, &eps, noise.as_deref())?;
        if !x.all_finite() {
            return Err(Error::Sampling { step: i + 1, t });
        }
    }
    Ok(Trajectory {
        states,
        final_sample: x,
    })
}

/// Draws `batch` samples from pure noise.
pub fn ddim_sample<D: Denoiser + ?Sized>(
    model: &D,
    schedule: &NoiseSchedule,
    plan: &SamplerPlan,
    batch: usize,
    rng: &Rng,
    record: bool,
) -> Result<Trajectory> {
    let ids: Vec<u64> = (0..batch as u64).collect();
    let x_t = initial_noise(rng, &ids, model.data_dim());
    ddim_sample_from(model, schedule, plan, x_t, 0, &ids, rng, record)
}

/// The pure-noise starting states used by [`ddim_sample`].
pub fn sampler_noise(rng: &Rng, batch: usize, dim: usize) -> Tensor<f32> {
    let ids: Vec<u64> = (0..batch as u64).collect();
    initial_noise(rng, &ids, dim)
}
