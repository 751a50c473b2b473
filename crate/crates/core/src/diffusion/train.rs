use log::info;

use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::netcore::{
    rng_normal, run_network, Adam, Affine, NoisePredictor, Real, Rng, Tape, Tensor,
};

/// Loss value and per-layer parameter gradients.
#[derive(Clone, Debug)]
pub struct LossOutput<T: Real> {
    pub loss: f64,
    pub grads: Vec<Affine<T>>,
}

/// Draws the per-row timesteps and noise for one loss evaluation. Timesteps
/// come first (one `below(T)` per row), then the noise tensor row by row.
pub fn draw_loss_inputs<T: Real>(
    schedule: &NoiseSchedule,
    batch: usize,
    dim: usize,
    rng: &mut Rng,
) -> (Vec<usize>, Tensor<T>) {
    let t: Vec<usize> = (0..batch)
        .map(|_| 1 + rng.below(schedule.t_train()))
        .collect();
    let eps = rng_normal(rng, &[batch, dim]);
    (t, eps)
}

/// Mean over the batch of `||eps - eps_theta(q_sample(x0, t, eps), t)||²`,
/// with gradients for every weight and bias.
pub fn simple_loss<T: Real>(
    schedule: &NoiseSchedule,
    model: &NoisePredictor<T>,
    x0: &Tensor<T>,
    rng: &mut Rng,
) -> Result<LossOutput<T>> {
    let dim = model.arch().data_dim;
    if x0.rows() == 0 {
        return Err(Error::Param("empty batch".into()));
    }
    if x0.cols() != dim {
        return Err(Error::Shape(format!(
            "data width {} for model width {}",
            x0.cols(),
            dim
        )));
    }
    let (t, eps) = draw_loss_inputs::<T>(schedule, x0.rows(), dim, rng);
    let xt = schedule.q_sample_rows(x0, &t, &eps)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let x = tape.constant(xt);
    let trace = run_network(model.arch(), model.layers(), &bound, &mut tape, x, &t)?;
    let target = tape.constant(eps);
    let loss = tape.sq_dist_mean(trace.out, target)?;
    let mut grads = tape.backward(loss)?;
    let grads = bound
        .vars
        .iter()
        .map(|&(w, b)| Affine {
            weight: grads.take(w).expect("weight gradient"),
            bias: grads.take(b).expect("bias gradient"),
        })
        .collect();
    Ok(LossOutput {
        loss: tape.scalar(loss).to_f64().unwrap(),
        grads,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 20_000,
            batch: 512,
            lr: 1e-3,
        }
    }
}

/// Regression bound on the final moving-average loss for the default toy
/// dataset and configuration.
pub const DEFAULT_LOSS_BOUND: f64 = 0.5;
pub const MOVING_AVERAGE_WINDOW: usize = 100;

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub model: NoisePredictor<f32>,
    pub losses: Vec<f64>,
}

impl TrainReport {
    /// Mean of the last (up to) 100 recorded losses.
    pub fn final_moving_average(&self) -> f64 {
        moving_average_tail(&self.losses, MOVING_AVERAGE_WINDOW)
    }
}

pub fn moving_average_tail(losses: &[f64], window: usize) -> f64 {
    let tail = &losses[losses.len().saturating_sub(window)..];
    if tail.is_empty() {
        return f64::NAN;
    }
    tail.iter().sum::<f64>() / tail.len() as f64
}

/// Trains with Adam on minibatches drawn with replacement from `data`.
pub fn train(
    mut model: NoisePredictor<f32>,
    data: &Tensor<f32>,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<TrainReport> {
    if data.rows() == 0 {
        return Err(Error::Param("empty dataset".into()));
    }
    if cfg.batch == 0 {
        return Err(Error::Param("batch size must be positive".into()));
    }
    let mut opt = Adam::new(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch).map(|_| rng.below(data.rows())).collect();
        let x0 = data.gather_rows(&idx);
        let out = simple_loss(schedule, &model, &x0, rng)?;
        if !out.loss.is_finite() {
            return Err(Error::Training {
                step,
                loss: out.loss,
            });
        }
        losses.push(out.loss);
        let mut params: Vec<&mut Tensor<f32>> = model
            .params_mut()
            .iter_mut()
            .flat_map(|p| [&mut p.weight, &mut p.bias])
            .collect();
        let grads: Vec<&Tensor<f32>> = out
            .grads
            .iter()
            .flat_map(|g| [&g.weight, &g.bias])
            .collect();
        opt.step(&mut params, &grads);
        if (step + 1) % 1000 == 0 {
            info!(
                "step {} loss(ma{}) {:.4}",
                step + 1,
                MOVING_AVERAGE_WINDOW,
                moving_average_tail(&losses, MOVING_AVERAGE_WINDOW)
            );
        }
    }
    Ok(TrainReport { model, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::Dataset;
    use crate::netcore::fd::{finite_diff_grad, max_rel_err};
    use crate::netcore::Arch;

    fn tiny_arch() -> Arch {
        Arch {
            data_dim: 2,
            width: 6,
            n_blocks: 2,
            emb_dim: 4,
            freq_base: 10_000.0,
            skip: None,
        }
    }

    #[test]
    fn zero_model_loss_is_noise_energy() {
        let schedule = NoiseSchedule::default_linear();
        let model = NoisePredictor::<f64>::zeros(Arch::default()).unwrap();
        let x0 = Dataset::default()
            .sample(4096, &mut Rng::new(1))
            .cast::<f64>();
        let out = simple_loss(&schedule, &model, &x0, &mut Rng::new(2)).unwrap();
        // E||eps||² = 2 with std error ~ 2/sqrt(4096)
        assert!((out.loss - 2.0).abs() < 0.1, "{}", out.loss);
    }

    #[test]
    fn empty_batch_rejected() {
        let schedule = NoiseSchedule::default_linear();
        let model = NoisePredictor::<f32>::zeros(Arch::default()).unwrap();
        let x0 = Tensor::zeros(&[0, 2]);
        assert!(matches!(
            simple_loss(&schedule, &model, &x0, &mut Rng::new(0)),
            Err(Error::Param(_))
        ));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let schedule = NoiseSchedule::default_linear();
        let model = NoisePredictor::<f64>::init(tiny_arch(), &mut Rng::new(3)).unwrap();
        let x0 = Dataset::default().sample(8, &mut Rng::new(4)).cast::<f64>();
        let rng = Rng::new(5);
        let out = simple_loss(&schedule, &model, &x0, &mut rng.clone()).unwrap();
        for layer in 0..model.params().len() {
            let w0 = model.params()[layer].weight.clone();
            let fd = finite_diff_grad(
                |w| {
                    let mut m = model.clone();
                    m.params_mut()[layer].weight = w.clone();
                    Ok(simple_loss(&schedule, &m, &x0, &mut rng.clone())?.loss)
                },
                &w0,
                1e-6,
            )
            .unwrap();
            let err = max_rel_err(&out.grads[layer].weight, &fd, 1e-6);
            assert!(err <= 1e-4, "layer {layer}: rel err {err}");
        }
    }

    #[test]
    fn zero_lr_keeps_weights_and_seed_is_reproducible() {
        let schedule = NoiseSchedule::default_linear();
        let data = Dataset::default().sample(256, &mut Rng::new(1));
        let model = NoisePredictor::<f32>::init(tiny_arch(), &mut Rng::new(2)).unwrap();
        let cfg = TrainConfig {
            steps: 5,
            batch: 16,
            lr: 0.0,
        };
        let rep = train(model.clone(), &data, &schedule, &cfg, &mut Rng::new(3)).unwrap();
        assert_eq!(rep.model, model);

        let cfg = TrainConfig { lr: 1e-3, ..cfg };
        let a = train(model.clone(), &data, &schedule, &cfg, &mut Rng::new(3)).unwrap();
        let b = train(model, &data, &schedule, &cfg, &mut Rng::new(3)).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.losses, b.losses);
    }
}
