//! Block-wise adaptive-rounding reconstruction of weight quantizers.
//!
//! Each quantized weight is `s * clip(floor(w/s) + h(V), cmin, cmax)` with
//! `h(V) = clip(sigmoid(V) * (zeta - gamma) + gamma, 0, 1)`. The block loss is
//!
//! ```text
//! mean_batch ||out_fp - out_q||² + lambda * sum(1 - |2 h(V) - 1|^beta)
//! ```
//!
//! The regularizer is off for the first `warmup` fraction of iterations, after
//! which `beta` decays linearly from `beta_start` to `beta_end`. Scales are
//! learned as `log s`. When optimization ends every `V` is collapsed to a hard
//! up/down decision (`V >= 0` rounds up).

use log::{debug, info};

use super::blocks::{block_recon_loss, BlockData, BlockView, ReconstructionBlock};
use crate::error::{Error, Result};
use crate::netcore::tape::{soft_round, ADAROUND_GAMMA, ADAROUND_ZETA};
use crate::netcore::{Adam, NoisePredictor, Real, Rng, Tape, Tensor};
use crate::quant::{quantize_dequantize, QuantizerParams, Rounding};

#[derive(Clone, Debug, PartialEq)]
pub struct AdaRoundOptions {
    pub iters: usize,
    pub batch: usize,
    pub lr_v: f64,
    pub lr_log_s: f64,
    pub lambda: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Fraction of iterations run without the rounding regularizer.
    pub warmup: f64,
    pub learn_scale: bool,
}

impl Default for AdaRoundOptions {
    fn default() -> Self {
        AdaRoundOptions {
            iters: 5000,
            batch: 64,
            lr_v: 1e-3,
            lr_log_s: 4e-5,
            lambda: 0.01,
            beta_start: 20.0,
            beta_end: 2.0,
            warmup: 0.2,
            learn_scale: true,
        }
    }
}

impl AdaRoundOptions {
    /// `(lambda, beta)` in effect at iteration `it`.
    pub fn schedule(&self, it: usize) -> (f64, f64) {
        let start = (self.warmup * self.iters as f64) as usize;
        if it < start {
            return (0.0, self.beta_start);
        }
        let span = (self.iters - start).max(1) as f64;
        let frac = ((it - start) as f64 / span).min(1.0);
        (
            self.lambda,
            self.beta_end + (self.beta_start - self.beta_end) * (1.0 - frac),
        )
    }
}

/// Outcome of calibrating one block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockReport {
    pub block: String,
    /// Loss of the starting quantizers on the optimization rows.
    pub initial_mse: f64,
    pub final_mse: f64,
    pub held_initial_mse: f64,
    pub held_final_mse: f64,
    /// Reconstruction loss on the optimization rows after each epoch.
    pub curve: Vec<f64>,
    /// The learned quantizers did worse than the starting ones and were
    /// discarded.
    pub kept_initial: bool,
}

/// Learnable rounding state of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftLayer<T: Real = f32> {
    pub layer: usize,
    pub v: Tensor<T>,
    /// One entry per output channel, or a single entry.
    pub log_s: Tensor<T>,
    pub cmin: i32,
    pub cmax: i32,
}

/// `V` with `h(V)` equal to the fractional part of `w / s`.
pub fn init_rounding_vars(w: &Tensor<f32>, p: &QuantizerParams) -> Tensor<f32> {
    let cols = w.cols().max(1);
    let span = ADAROUND_ZETA - ADAROUND_GAMMA;
    let data = w
        .data()
        .iter()
        .enumerate()
        .map(|(k, &wv)| {
            let x = (wv / p.scale_at(k, cols)) as f64;
            let frac = x - x.floor();
            let sig = ((frac - ADAROUND_GAMMA) / span).clamp(1e-6, 1.0 - 1e-6);
            (sig / (1.0 - sig)).ln() as f32
        })
        .collect();
    Tensor::new(w.shape().to_vec(), data).expect("same shape as weight")
}

impl SoftLayer<f32> {
    pub fn from_params(layer: usize, w: &Tensor<f32>, p: &QuantizerParams) -> Result<Self> {
        if p.zero_offset != 0 {
            return Err(Error::Param("weight quantizers must be symmetric".into()));
        }
        let log_s = p.scale.iter().map(|s| s.ln()).collect::<Vec<_>>();
        Ok(SoftLayer {
            layer,
            v: init_rounding_vars(w, p),
            log_s: Tensor::new(vec![log_s.len()], log_s)?,
            cmin: p.cmin,
            cmax: p.cmax,
        })
    }

    /// Quantizer with the soft rounding kept as is.
    pub fn soft_params(&self, bits: u32) -> QuantizerParams {
        QuantizerParams {
            bits,
            scale: self.log_s.data().iter().map(|l| l.exp()).collect(),
            cmin: self.cmin,
            cmax: self.cmax,
            zero_offset: 0,
            rounding: Rounding::AdaRound { v: self.v.clone() },
        }
    }

    /// Quantizer with every rounding decision made hard.
    pub fn hard_params(&self, bits: u32) -> QuantizerParams {
        QuantizerParams {
            rounding: Rounding::Fixed {
                up: self.v.data().iter().map(|&v| v >= 0.0).collect(),
            },
            ..self.soft_params(bits)
        }
    }
}

/// Objective value and gradients with respect to each layer's `V` and
/// `log s`.
#[derive(Clone, Debug)]
pub struct ObjectiveEval<T: Real> {
    pub total: T,
    pub recon: T,
    pub grad_v: Vec<Tensor<T>>,
    pub grad_log_s: Vec<Tensor<T>>,
}

/// Evaluates the block objective. Block layers without a [`SoftLayer`] run
/// with their full-precision weights.
pub fn adaround_objective<T: Real>(
    model: &NoisePredictor<T>,
    block: &ReconstructionBlock,
    soft: &[SoftLayer<T>],
    data: &BlockData<T>,
    lambda: f64,
    beta: f64,
    with_grad: bool,
) -> Result<ObjectiveEval<T>> {
    let n = model.layers().len();
    let mut tape = Tape::new();
    let mut view = BlockView {
        weights: vec![None; n],
        acts: vec![None; n],
    };
    let mut leaves = Vec::with_capacity(soft.len());
    for &i in &block.layers {
        let p = &model.params()[i];
        let w = match soft.iter().position(|s| s.layer == i) {
            Some(k) => {
                let s = &soft[k];
                let v = tape.param(s.v.clone());
                let ls = tape.param(s.log_s.clone());
                leaves.push((k, v, ls));
                tape.soft_round_weight(
                    &p.weight,
                    v,
                    ls,
                    T::from_i32(s.cmin).unwrap(),
                    T::from_i32(s.cmax).unwrap(),
                )?
            }
            None => tape.constant(p.weight.clone()),
        };
        view.weights[i] = Some((w, tape.constant(p.bias.clone())));
    }
    let recon = block_recon_loss(model, block, &view, &mut tape, data)?;
    let mut total = recon;
    if lambda != 0.0 {
        for &(_, v, _) in &leaves {
            let reg = tape.round_reg(v, T::from_f64_lossy(beta));
            total = tape.add_scaled(total, reg, T::from_f64_lossy(lambda));
        }
    }
    let (mut grad_v, mut grad_log_s) = (Vec::new(), Vec::new());
    if with_grad {
        let mut g = tape.backward(total)?;
        grad_v = soft.iter().map(|s| Tensor::zeros(s.v.shape())).collect();
        grad_log_s = soft
            .iter()
            .map(|s| Tensor::zeros(s.log_s.shape()))
            .collect();
        for &(k, v, ls) in &leaves {
            if let Some(gv) = g.take(v) {
                grad_v[k] = gv;
            }
            if let Some(gs) = g.take(ls) {
                grad_log_s[k] = gs;
            }
        }
    }
    Ok(ObjectiveEval {
        total: tape.scalar(total),
        recon: tape.scalar(recon),
        grad_v,
        grad_log_s,
    })
}

/// Reconstruction loss of the block with fixed weight quantizers. Layers
/// missing from `quant` use full-precision weights.
pub fn block_mse(
    model: &NoisePredictor<f32>,
    block: &ReconstructionBlock,
    quant: &[(usize, QuantizerParams)],
    data: &BlockData<f32>,
) -> Result<f64> {
    let n = model.layers().len();
    let mut tape = Tape::new();
    let mut view = BlockView {
        weights: vec![None; n],
        acts: vec![None; n],
    };
    for &i in &block.layers {
        let p = &model.params()[i];
        let w = match quant.iter().find(|(l, _)| *l == i) {
            Some((_, q)) => quantize_dequantize(&p.weight, q)?,
            None => p.weight.clone(),
        };
        view.weights[i] = Some((tape.constant(w), tape.constant(p.bias.clone())));
    }
    let loss = block_recon_loss(model, block, &view, &mut tape, data)?;
    Ok(tape.scalar(loss) as f64)
}

fn non_finite(block: &ReconstructionBlock, what: &str) -> Error {
    Error::Calibration {
        block: block.name(),
        reason: format!("non-finite {what}"),
    }
}

/// Optimizes the rounding of every layer in `init` against `train` and
/// returns the collapsed quantizers. Falls back to `init` if the hard result
/// reconstructs `train` worse.
pub fn reconstruct_weights(
    model: &NoisePredictor<f32>,
    block: &ReconstructionBlock,
    init: &[(usize, QuantizerParams)],
    train: &BlockData<f32>,
    held: Option<&BlockData<f32>>,
    opts: &AdaRoundOptions,
    rng: &mut Rng,
) -> Result<(Vec<(usize, QuantizerParams)>, BlockReport)> {
    if train.is_empty() {
        return Err(Error::Param(format!(
            "no calibration rows for block {}",
            block.name()
        )));
    }
    let initial_mse = block_mse(model, block, init, train)?;
    let held_initial_mse = match held {
        Some(h) if !h.is_empty() => block_mse(model, block, init, h)?,
        _ => f64::NAN,
    };
    if !initial_mse.is_finite() {
        return Err(non_finite(block, "reconstruction loss"));
    }
    if init.is_empty() {
        return Ok((
            Vec::new(),
            BlockReport {
                block: block.name(),
                initial_mse,
                final_mse: initial_mse,
                held_initial_mse,
                held_final_mse: held_initial_mse,
                curve: Vec::new(),
                kept_initial: true,
            },
        ));
    }

    let mut soft = init
        .iter()
        .map(|(l, p)| SoftLayer::from_params(*l, &model.params()[*l].weight, p))
        .collect::<Result<Vec<_>>>()?;
    let mut opt_v = Adam::<f32>::new(opts.lr_v);
    let mut opt_s = Adam::<f32>::new(opts.lr_log_s);
    let epoch = (train.len() / opts.batch.max(1)).max(1);
    let mut curve = Vec::new();
    for it in 0..opts.iters {
        let idx: Vec<usize> = (0..opts.batch).map(|_| rng.below(train.len())).collect();
        let batch = train.rows(&idx);
        let (lambda, beta) = opts.schedule(it);
        let eval = adaround_objective(model, block, &soft, &batch, lambda, beta, true)?;
        if !eval.total.is_finite() {
            return Err(non_finite(block, "loss"));
        }
        {
            let mut vs: Vec<&mut Tensor<f32>> = soft.iter_mut().map(|s| &mut s.v).collect();
            let gv: Vec<&Tensor<f32>> = eval.grad_v.iter().collect();
            opt_v.step(&mut vs, &gv);
        }
        if opts.learn_scale {
            let mut ss: Vec<&mut Tensor<f32>> = soft.iter_mut().map(|s| &mut s.log_s).collect();
            let gs: Vec<&Tensor<f32>> = eval.grad_log_s.iter().collect();
            opt_s.step(&mut ss, &gs);
        }
        if (it + 1) % epoch == 0 || it + 1 == opts.iters {
            let full = adaround_objective(model, block, &soft, train, 0.0, beta, false)?;
            if !full.recon.is_finite() {
                return Err(non_finite(block, "reconstruction loss"));
            }
            curve.push(full.recon as f64);
            debug!(
                "{} iter {} recon {:.6} lambda {} beta {:.2}",
                block.name(),
                it + 1,
                full.recon,
                lambda,
                beta
            );
        }
    }

    let learned: Vec<(usize, QuantizerParams)> = soft
        .iter()
        .zip(init)
        .map(|(s, (l, p))| (*l, s.hard_params(p.bits)))
        .collect();
    let learned_mse = block_mse(model, block, &learned, train)?;
    let kept_initial = !(learned_mse <= initial_mse);
    let (result, final_mse) = if kept_initial {
        (init.to_vec(), initial_mse)
    } else {
        (learned, learned_mse)
    };
    let held_final_mse = match held {
        Some(h) if !h.is_empty() => block_mse(model, block, &result, h)?,
        _ => f64::NAN,
    };
    info!(
        "{}: weight recon {:.6} -> {:.6} (held-out {:.6} -> {:.6}){}",
        block.name(),
        initial_mse,
        final_mse,
        held_initial_mse,
        held_final_mse,
        if kept_initial { ", kept nearest" } else { "" }
    );
    Ok((
        result,
        BlockReport {
            block: block.name(),
            initial_mse,
            final_mse,
            held_initial_mse,
            held_final_mse,
            curve,
            kept_initial,
        },
    ))
}

/// Hard rounding decisions implied by `V`; exposed for inspection.
pub fn hard_decisions(v: &Tensor<f32>) -> Vec<bool> {
    v.data().iter().map(|&x| soft_round(x) >= 0.5).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calib::blocks::{block_forward, partition_blocks};
    use crate::netcore::fd::{finite_diff_grad, max_rel_err};
    use crate::netcore::{rng_normal, Affine, Arch};
    use crate::quant::{init_scale_minmax, Granularity};

    fn micro_arch(width: usize) -> Arch {
        Arch {
            data_dim: 2,
            width,
            n_blocks: 1,
            emb_dim: 2,
            skip: None,
            ..Arch::default()
        }
    }

    #[test]
    fn init_matches_fractional_part() {
        let w = Tensor::new(vec![1, 3], vec![0.33f32, -0.71, 0.5]).unwrap();
        let p = QuantizerParams::symmetric(4, vec![0.2]).unwrap();
        let v = init_rounding_vars(&w, &p);
        for (k, &wv) in w.data().iter().enumerate() {
            let x = wv / 0.2;
            assert!((soft_round(v.data()[k]) - (x - x.floor())).abs() < 1e-5);
        }
        // Soft rounding at init reproduces the weight exactly.
        let soft = QuantizerParams {
            rounding: Rounding::AdaRound { v },
            ..p
        };
        let q = quantize_dequantize(&w, &soft).unwrap();
        for (a, b) in q.data().iter().zip(w.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn beta_schedule() {
        let o = AdaRoundOptions {
            iters: 100,
            ..Default::default()
        };
        assert_eq!(o.schedule(0), (0.0, 20.0));
        assert_eq!(o.schedule(19), (0.0, 20.0));
        assert_eq!(o.schedule(20), (0.01, 20.0));
        assert!((o.schedule(99).1 - 2.225).abs() < 1e-9);
    }

    /// Residual-block objective gradients against central differences.
    #[test]
    fn objective_gradients_match_finite_differences() {
        let arch = micro_arch(4);
        let mut rng = Rng::new(11);
        let model = NoisePredictor::<f64>::init(arch, &mut rng).unwrap();
        let block = partition_blocks(&model)[1].clone();
        let data = BlockData::<f64> {
            input: rng_normal(&mut rng, &[6, 4]),
            emb: rng_normal(&mut rng, &[6, 2]),
            target: rng_normal(&mut rng, &[6, 4]),
        };
        let soft: Vec<SoftLayer<f64>> = block
            .layers
            .iter()
            .map(|&l| {
                let w = model.params()[l].weight.cast::<f32>();
                let p = init_scale_minmax(&w, 3, Granularity::PerChannel).unwrap();
                let mut s = SoftLayer::from_params(l, &w, &p).unwrap();
                // Move V off the clip plateau so every entry has a gradient.
                s.v = s.v.map(|x| x.clamp(-1.5, 1.5));
                // Min/max scales put the largest weight exactly on a grid
                // point, where floor(w/s) jumps; shift off it.
                SoftLayer {
                    layer: l,
                    v: s.v.cast(),
                    log_s: s.log_s.cast::<f64>().map(|x| x + 0.013),
                    cmin: s.cmin,
                    cmax: s.cmax,
                }
            })
            .collect();
        let (lambda, beta) = (0.05, 3.0);
        let eval = adaround_objective(&model, &block, &soft, &data, lambda, beta, true).unwrap();
        for k in 0..soft.len() {
            let fv = |v: &Tensor<f64>| {
                let mut s = soft.clone();
                s[k].v = v.clone();
                Ok(adaround_objective(&model, &block, &s, &data, lambda, beta, false)?.total)
            };
            let fd = finite_diff_grad(fv, &soft[k].v, 1e-6).unwrap();
            assert!(
                max_rel_err(&eval.grad_v[k], &fd, 1e-6) <= 1e-4,
                "V of layer {k}"
            );
        }
        // log s changes floor(w/s) in steps; keep perturbations small enough
        // that no weight crosses a grid boundary.
        for k in 0..soft.len() {
            let fs = |ls: &Tensor<f64>| {
                let mut s = soft.clone();
                s[k].log_s = ls.clone();
                Ok(adaround_objective(&model, &block, &s, &data, lambda, beta, false)?.total)
            };
            let fd = finite_diff_grad(fs, &soft[k].log_s, 1e-7).unwrap();
            assert!(
                max_rel_err(&eval.grad_log_s[k], &fd, 1e-6) <= 1e-4,
                "log s of layer {k}: {:?} vs {:?}",
                eval.grad_log_s[k],
                fd
            );
        }
    }

    #[test]
    fn exact_inputs_and_bypass_give_zero_loss() {
        let arch = micro_arch(4);
        let model = NoisePredictor::<f32>::init(arch, &mut Rng::new(2)).unwrap();
        let block = partition_blocks(&model)[1].clone();
        let mut rng = Rng::new(3);
        let input = rng_normal::<f32>(&mut rng, &[8, 4]);
        let emb = rng_normal::<f32>(&mut rng, &[8, 2]);
        let mut data = BlockData {
            input,
            emb,
            target: Tensor::zeros(&[8, 4]),
        };
        let eval = adaround_objective(&model, &block, &[], &data, 0.0, 2.0, false).unwrap();
        assert!(eval.recon > 0.0);
        data.target = block_forward(&model, &block, &data.input, &data.emb).unwrap();
        let eval = adaround_objective(&model, &block, &[], &data, 0.0, 2.0, true).unwrap();
        assert_eq!(eval.recon, 0.0);
        let (q, rep) = reconstruct_weights(
            &model,
            &block,
            &[],
            &data,
            None,
            &AdaRoundOptions::default(),
            &mut rng,
        )
        .unwrap();
        assert!(q.is_empty());
        assert_eq!(rep.final_mse, 0.0);
    }

    /// Two weights, 2-bit, no regularizer: the learned hard rounding equals the
    /// best of the four floor/ceil assignments. The inputs are independent so
    /// the relaxed optimum separates per weight; the target comes from a
    /// different weight vector so that nearest rounding of `w` is not the
    /// answer.
    #[test]
    fn exhaustive_rounding_oracle() {
        let arch = Arch {
            data_dim: 2,
            width: 1,
            n_blocks: 0,
            emb_dim: 2,
            skip: None,
            ..Arch::default()
        };
        let w = Tensor::new(vec![1, 2], vec![0.06f32, -0.26]).unwrap();
        let w_star = [0.16f32, -0.36];
        let params = vec![
            Affine {
                weight: w.clone(),
                bias: Tensor::zeros(&[1]),
            },
            Affine {
                weight: Tensor::zeros(&[2, 1]),
                bias: Tensor::zeros(&[2]),
            },
        ];
        let model = NoisePredictor::from_params(arch, params).unwrap();
        let block = partition_blocks(&model)[0].clone();
        let mut rng = Rng::new(4);
        let n = 256;
        let input = rng_normal::<f32>(&mut rng, &[n, 2]);
        let target = Tensor::new(
            vec![n, 1],
            (0..n)
                .map(|i| w_star[0] * input.row(i)[0] + w_star[1] * input.row(i)[1])
                .collect(),
        )
        .unwrap();
        let data = BlockData {
            input,
            emb: Tensor::zeros(&[n, 2]),
            target,
        };
        let p = QuantizerParams::symmetric(2, vec![0.2]).unwrap();
        let opts = AdaRoundOptions {
            iters: 3000,
            batch: 64,
            lr_v: 1e-2,
            lambda: 0.0,
            learn_scale: false,
            ..Default::default()
        };
        let (q, _) = reconstruct_weights(
            &model,
            &block,
            &[(0, p.clone())],
            &data,
            None,
            &opts,
            &mut rng,
        )
        .unwrap();
        let learned = block_mse(&model, &block, &q, &data).unwrap();
        let mut best = f64::INFINITY;
        for mask in 0..4u32 {
            let up = vec![mask & 1 == 1, mask & 2 == 2];
            let cand = QuantizerParams {
                rounding: Rounding::Fixed { up },
                ..p.clone()
            };
            best = best.min(block_mse(&model, &block, &[(0, cand)], &data).unwrap());
        }
        let nearest = block_mse(&model, &block, &[(0, p)], &data).unwrap();
        assert!(
            best < nearest,
            "oracle setup should make nearest suboptimal"
        );
        assert!((learned - best).abs() <= 1e-5 * best, "{learned} vs {best}");
    }
}
