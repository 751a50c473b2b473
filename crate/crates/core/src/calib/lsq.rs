//! Learned step sizes for activation quantizers.
//!
//! Each quantized layer input is `s * (clip(round(x/s + z), cmin, cmax) - z)`
//! with the integer offset `z` fixed after min/max initialization. Only
//! `log s` is trained, on the block reconstruction loss, using the
//! straight-through derivative: inside the clip range
//! `dq/ds = round(x/s + z) - z - x/s`, outside `c - z` for the active bound.

use std::cell::RefCell;

use log::{info, warn};

use super::adaround::BlockReport;
use super::blocks::{block_recon_loss, capture_block_data, ActSpec, BlockData, BlockView};
use super::blocks::{partition_blocks, ReconstructionBlock};
use crate::error::{Error, Result};
use crate::netcore::tape::round_half_away;
use crate::netcore::{Adam, LayerView, NoisePredictor, Real, Rng, Tape, Tensor, Var};
use crate::quant::{QuantizedModel, QuantizerParams, Slot};

#[derive(Clone, Debug, PartialEq)]
pub struct LsqOptions {
    pub iters: usize,
    pub batch: usize,
    pub lr_log_s: f64,
}

impl Default for LsqOptions {
    fn default() -> Self {
        LsqOptions {
            iters: 5000,
            batch: 64,
            lr_log_s: 4e-5,
        }
    }
}

/// Step-size state of one activation quantizer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActLayer<T: Real = f32> {
    pub layer: usize,
    pub log_s: T,
    pub zero: i32,
    pub cmin: i32,
    pub cmax: i32,
}

impl ActLayer<f32> {
    pub fn from_params(layer: usize, p: &QuantizerParams) -> Result<Self> {
        if p.scale.len() != 1 {
            return Err(Error::Param("activation quantizers are per-tensor".into()));
        }
        Ok(ActLayer {
            layer,
            log_s: p.scale[0].ln(),
            zero: p.zero_offset,
            cmin: p.cmin,
            cmax: p.cmax,
        })
    }

    pub fn params(&self, bits: u32) -> QuantizerParams {
        QuantizerParams {
            bits,
            scale: vec![self.log_s.exp()],
            cmin: self.cmin,
            cmax: self.cmax,
            zero_offset: self.zero,
            rounding: crate::quant::Rounding::Nearest,
        }
    }
}

/// Block reconstruction loss with fixed `weights` (every layer of the block)
/// and input quantizers `acts`, plus `d loss / d log s` for each entry of
/// `acts` when `with_grad`.
pub fn act_objective<T: Real>(
    model: &NoisePredictor<T>,
    block: &ReconstructionBlock,
    weights: &[(usize, Tensor<T>)],
    acts: &[ActLayer<T>],
    data: &BlockData<T>,
    with_grad: bool,
) -> Result<(T, Vec<T>)> {
    let n = model.layers().len();
    let mut tape = Tape::new();
    let mut view = BlockView {
        weights: vec![None; n],
        acts: vec![None; n],
    };
    for &i in &block.layers {
        let w = weights
            .iter()
            .find(|(l, _)| *l == i)
            .map(|(_, w)| w.clone())
            .ok_or_else(|| Error::State(format!("no weight for layer {i}")))?;
        view.weights[i] = Some((
            tape.constant(w),
            tape.constant(model.params()[i].bias.clone()),
        ));
    }
    let mut leaves = Vec::with_capacity(acts.len());
    for a in acts {
        let ls = tape.param(Tensor::full(&[1], a.log_s));
        leaves.push(ls);
        view.acts[a.layer] = Some(ActSpec {
            log_s: ls,
            zero: a.zero as f64,
            cmin: a.cmin as f64,
            cmax: a.cmax as f64,
        });
    }
    let loss = block_recon_loss(model, block, &view, &mut tape, data)?;
    let mut grads = Vec::new();
    if with_grad {
        let g = tape.backward(loss)?;
        grads = leaves
            .iter()
            .map(|&v| g.get(v).map_or(T::zero(), |t| t.data()[0]))
            .collect();
    }
    Ok((tape.scalar(loss), grads))
}

fn non_finite(block: &ReconstructionBlock) -> Error {
    Error::Calibration {
        block: block.name(),
        reason: "non-finite activation calibration loss".into(),
    }
}

/// Refines the step sizes in `init` on `train`. Keeps `init` when the result
/// does not lower the loss on `train`.
#[allow(clippy::too_many_arguments)]
pub fn reconstruct_act_steps(
    model: &NoisePredictor<f32>,
    block: &ReconstructionBlock,
    weights: &[(usize, Tensor<f32>)],
    init: &[(usize, QuantizerParams)],
    train: &BlockData<f32>,
    held: Option<&BlockData<f32>>,
    opts: &LsqOptions,
    rng: &mut Rng,
) -> Result<(Vec<(usize, QuantizerParams)>, BlockReport)> {
    if train.is_empty() {
        return Err(Error::Param(format!(
            "no calibration rows for block {}",
            block.name()
        )));
    }
    let start: Vec<ActLayer<f32>> = init
        .iter()
        .map(|(l, p)| ActLayer::from_params(*l, p))
        .collect::<Result<_>>()?;
    let loss_on = |acts: &[ActLayer<f32>], d: &BlockData<f32>| -> Result<f64> {
        Ok(act_objective(model, block, weights, acts, d, false)?.0 as f64)
    };
    let initial_mse = loss_on(&start, train)?;
    if !initial_mse.is_finite() {
        return Err(non_finite(block));
    }
    let held_initial_mse = match held {
        Some(h) if !h.is_empty() => loss_on(&start, h)?,
        _ => f64::NAN,
    };

    let mut acts = start.clone();
    let mut curve = Vec::new();
    if !acts.is_empty() {
        let mut opt = Adam::<f32>::new(opts.lr_log_s);
        let mut state: Vec<Tensor<f32>> =
            acts.iter().map(|a| Tensor::full(&[1], a.log_s)).collect();
        let epoch = (train.len() / opts.batch.max(1)).max(1);
        for it in 0..opts.iters {
            let idx: Vec<usize> = (0..opts.batch).map(|_| rng.below(train.len())).collect();
            let (loss, g) = act_objective(model, block, weights, &acts, &train.rows(&idx), true)?;
            if !loss.is_finite() {
                return Err(non_finite(block));
            }
            let gt: Vec<Tensor<f32>> = g.iter().map(|&v| Tensor::full(&[1], v)).collect();
            let mut ps: Vec<&mut Tensor<f32>> = state.iter_mut().collect();
            opt.step(&mut ps, &gt.iter().collect::<Vec<_>>());
            for (a, s) in acts.iter_mut().zip(&state) {
                a.log_s = s.data()[0];
            }
            if (it + 1) % epoch == 0 || it + 1 == opts.iters {
                curve.push(loss_on(&acts, train)?);
            }
        }
    }
    let learned_mse = loss_on(&acts, train)?;
    let kept_initial = !(learned_mse <= initial_mse);
    let (chosen, final_mse) = if kept_initial {
        (start, initial_mse)
    } else {
        (acts, learned_mse)
    };
    let held_final_mse = match held {
        Some(h) if !h.is_empty() => loss_on(&chosen, h)?,
        _ => f64::NAN,
    };
    let result = chosen
        .iter()
        .zip(init)
        .map(|(a, (l, p))| (*l, a.params(p.bits)))
        .collect();
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

/// Initializes every activation quantizer from min/max over `train`, then
/// refines step sizes block by block in execution order. Inputs of each
/// block come from the fully quantized prefix; weight quantizers are only
/// read. Does nothing (with a warning) when activation quantization is off.
pub fn calibrate_activations(
    qm: &mut QuantizedModel,
    train: (&Tensor<f32>, &[usize]),
    held: Option<(&Tensor<f32>, &[usize])>,
    opts: &LsqOptions,
    rng: &Rng,
) -> Result<Vec<BlockReport>> {
    if !qm.config().act_quant_enabled() {
        warn!("activation quantization is disabled; skipping step-size calibration");
        return Ok(Vec::new());
    }
    if train.0.rows() == 0 {
        return Err(Error::Param("calibration set is empty".into()));
    }
    qm.init_activations_minmax(train.0, train.1)?;
    let blocks = partition_blocks(qm.base());
    let mut reports = Vec::with_capacity(blocks.len());
    for block in &blocks {
        let data = capture_block_data(qm, block, train.0, train.1, true)?;
        let held_data = match held {
            Some((x, t)) if x.rows() > 0 => Some(capture_block_data(qm, block, x, t, true)?),
            _ => None,
        };
        let weights = block
            .layers
            .iter()
            .map(|&l| Ok((l, qm.effective_weight(l)?)))
            .collect::<Result<Vec<_>>>()?;
        let init: Vec<(usize, QuantizerParams)> = block
            .layers
            .iter()
            .filter_map(|&l| match qm.act_slot(l) {
                Slot::Ready(p) => Some((l, p.clone())),
                _ => None,
            })
            .collect();
        let mut brng = rng.substream(block.stage_index as u64);
        let (params, report) = reconstruct_act_steps(
            qm.base(),
            block,
            &weights,
            &init,
            &data,
            held_data.as_ref(),
            opts,
            &mut brng,
        )?;
        info!(
            "{}: activation recon {:.6} -> {:.6}",
            block.name(),
            report.initial_mse,
            report.final_mse
        );
        for (l, p) in params {
            qm.set_act_quantizer(l, p)?;
        }
        reports.push(report);
    }
    Ok(reports)
}

/// A view that replaces each activation quantizer with its linearization
/// around a base step size: `x + s * r0` inside the clip range with the
/// rounding residual `r0` frozen, `s * (c - z)` outside. Its exact
/// derivative in `log s` is the straight-through estimate.
struct Frozen<'a> {
    weights: &'a [(usize, Tensor<f64>)],
    bias: Vec<Tensor<f64>>,
    acts: Vec<Option<(f64, ActLayer<f64>)>>,
    residuals: RefCell<Vec<Option<Vec<(bool, f64)>>>>,
    record: bool,
}

impl LayerView<f64> for Frozen<'_> {
    fn weights(&self, tape: &mut Tape<f64>, layer: usize) -> Result<(Var, Var)> {
        let w = self
            .weights
            .iter()
            .find(|(l, _)| *l == layer)
            .unwrap()
            .1
            .clone();
        Ok((tape.constant(w), tape.constant(self.bias[layer].clone())))
    }

    fn input(&self, tape: &mut Tape<f64>, layer: usize, x: Var) -> Result<Var> {
        let Some((log_s, a)) = self.acts[layer] else {
            return Ok(x);
        };
        let s = log_s.exp();
        let (z, lo, hi) = (a.zero as f64, a.cmin as f64, a.cmax as f64);
        let xv = tape.value(x).clone();
        let mut res = self.residuals.borrow_mut();
        if self.record {
            res[layer] = Some(
                xv.data()
                    .iter()
                    .map(|&v| {
                        let u = v / s + z;
                        let q = round_half_away(u);
                        if q < lo || q > hi {
                            (false, if q < lo { lo - z } else { hi - z })
                        } else {
                            (true, q - z - v / s)
                        }
                    })
                    .collect(),
            );
        }
        let r = res[layer].as_ref().unwrap();
        let out = Tensor::new(
            xv.shape().to_vec(),
            xv.data()
                .iter()
                .zip(r)
                .map(|(&v, &(inside, r0))| if inside { v + s * r0 } else { s * r0 })
                .collect(),
        )?;
        Ok(tape.constant(out))
    }
}

/// Block reconstruction loss with every activation quantizer replaced by its
/// linearization around the step sizes in `acts`, evaluated at `log_s`
/// (one entry per element of `acts`). The rounding residuals and clip
/// decisions are recorded in a forward pass at the base step sizes, so the
/// exact derivative of this function at `log_s = acts[..].log_s` is the
/// straight-through gradient returned by [`act_objective`]. Meant as a
/// finite-difference oracle.
pub fn frozen_residual_loss(
    model: &NoisePredictor<f64>,
    block: &ReconstructionBlock,
    weights: &[(usize, Tensor<f64>)],
    acts: &[ActLayer<f64>],
    data: &BlockData<f64>,
    log_s: &[f64],
) -> Result<f64> {
    if log_s.len() != acts.len() {
        return Err(Error::Shape(format!(
            "{} step sizes for {} activation quantizers",
            log_s.len(),
            acts.len()
        )));
    }
    for &(l, _) in weights {
        if !block.layers.contains(&l) {
            return Err(Error::Param(format!("layer {l} is outside the block")));
        }
    }
    if block
        .layers
        .iter()
        .any(|l| !weights.iter().any(|(w, _)| w == l))
    {
        return Err(Error::Param("every block layer needs a weight".into()));
    }
    let n = model.layers().len();
    let bias: Vec<Tensor<f64>> = model.params().iter().map(|p| p.bias.clone()).collect();
    let view = |ls: &[f64], record: bool, res: Vec<Option<Vec<(bool, f64)>>>| {
        let mut a = vec![None; n];
        for (k, act) in acts.iter().enumerate() {
            a[act.layer] = Some((ls[k], *act));
        }
        Frozen {
            weights,
            bias: bias.clone(),
            acts: a,
            residuals: RefCell::new(res),
            record,
        }
    };
    let eval = |v: &Frozen| -> Result<f64> {
        let mut tape = Tape::new();
        let l = block_recon_loss(model, block, v, &mut tape, data)?;
        Ok(tape.scalar(l))
    };
    let base: Vec<f64> = acts.iter().map(|a| a.log_s).collect();
    let rec = view(&base, true, vec![None; n]);
    eval(&rec)?;
    eval(&view(log_s, false, rec.residuals.into_inner()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::fd::{finite_diff_grad, max_rel_err};
    use crate::netcore::{rng_normal, Affine, Arch};
    use crate::quant::init_activation_minmax;

    #[test]
    fn exact_multiples_have_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let s = 0.25f64;
        let x = tape.constant(Tensor::new(vec![2, 2], vec![0.25, 0.5, -0.75, 1.0]).unwrap());
        let ls = tape.param(Tensor::full(&[1], s.ln()));
        let q = tape.act_quant(x, ls, 4.0, 0.0, 15.0).unwrap();
        let target = tape.constant(Tensor::full(&[2, 2], 0.3));
        let loss = tape.sq_dist_mean(q, target).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(ls).unwrap().data()[0], 0.0);
    }

    #[test]
    fn clipped_value_gradient_is_scaled_bound() {
        let mut tape = Tape::<f64>::new();
        let s = 0.1f64;
        // 5.0 / 0.1 = 50 is far above cmax = 15 with zero offset 0.
        let x = tape.constant(Tensor::new(vec![1, 1], vec![5.0]).unwrap());
        let ls = tape.param(Tensor::full(&[1], s.ln()));
        let q = tape.act_quant(x, ls, 0.0, 0.0, 15.0).unwrap();
        let zero = tape.constant(Tensor::full(&[1], 0.0));
        let loss = tape.add_scaled(zero, q, 1.0);
        let g = tape.backward(loss).unwrap();
        // d q / d log s = s * dq/ds = s * cmax
        assert!((g.get(ls).unwrap().data()[0] - s * 15.0).abs() < 1e-12);
    }

    #[test]
    fn step_size_gradients_match_frozen_surrogate() {
        let arch = Arch {
            width: 4,
            n_blocks: 1,
            emb_dim: 2,
            skip: None,
            ..Arch::default()
        };
        let mut rng = Rng::new(21);
        let model = NoisePredictor::<f64>::init(arch, &mut rng).unwrap();
        let block = partition_blocks(&model)[1].clone();
        let data = BlockData::<f64> {
            input: rng_normal(&mut rng, &[8, 4]),
            emb: rng_normal(&mut rng, &[8, 2]),
            target: rng_normal(&mut rng, &[8, 4]),
        };
        let weights: Vec<(usize, Tensor<f64>)> = block
            .layers
            .iter()
            .map(|&l| (l, model.params()[l].weight.clone()))
            .collect();
        // 3-bit quantizers with ranges narrow enough that some inputs clip.
        let acts: Vec<ActLayer<f64>> = block
            .layers
            .iter()
            .map(|&l| ActLayer {
                layer: l,
                log_s: (0.21f64).ln(),
                zero: 3,
                cmin: 0,
                cmax: 7,
            })
            .collect();
        let (_, g) = act_objective(&model, &block, &weights, &acts, &data, true).unwrap();

        let base: Vec<f64> = acts.iter().map(|a| a.log_s).collect();
        let (loss_ste, _) = act_objective(&model, &block, &weights, &acts, &data, false).unwrap();
        let at_base = frozen_residual_loss(&model, &block, &weights, &acts, &data, &base).unwrap();
        assert!((at_base - loss_ste).abs() < 1e-12);
        let x0 = Tensor::new(vec![base.len()], base.clone()).unwrap();
        let fd = finite_diff_grad(
            |ls| frozen_residual_loss(&model, &block, &weights, &acts, &data, ls.data()),
            &x0,
            1e-6,
        )
        .unwrap();
        let g = Tensor::new(vec![g.len()], g).unwrap();
        assert!(max_rel_err(&g, &fd, 1e-8) <= 1e-4, "{g:?} vs {fd:?}");
        assert!(g.data().iter().all(|v| *v != 0.0));
    }

    /// One scalar stream through an identity layer: the block loss is the
    /// quantization MSE, so a brute-force scan over s is the oracle.
    #[test]
    fn learned_step_close_to_grid_optimum() {
        let arch = Arch {
            data_dim: 1,
            width: 1,
            n_blocks: 0,
            emb_dim: 2,
            skip: None,
            ..Arch::default()
        };
        let params = vec![
            Affine {
                weight: Tensor::full(&[1, 1], 1.0f32),
                bias: Tensor::zeros(&[1]),
            },
            Affine {
                weight: Tensor::zeros(&[1, 1]),
                bias: Tensor::zeros(&[1]),
            },
        ];
        let model = NoisePredictor::from_params(arch, params).unwrap();
        let block = partition_blocks(&model)[0].clone();
        let mut rng = Rng::new(5);
        let x = rng_normal::<f32>(&mut rng, &[4000, 1]);
        let data = BlockData {
            input: x.clone(),
            emb: Tensor::zeros(&[4000, 2]),
            target: x.clone(),
        };
        let lo = x.data().iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = x.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let p0 = init_activation_minmax(lo, hi, 4).unwrap();
        let weights = vec![(0usize, Tensor::full(&[1, 1], 1.0f32))];
        let opts = LsqOptions {
            iters: 3000,
            batch: 256,
            lr_log_s: 5e-3,
        };
        let (q, rep) = reconstruct_act_steps(
            &model,
            &block,
            &weights,
            &[(0, p0.clone())],
            &data,
            None,
            &opts,
            &mut rng,
        )
        .unwrap();
        let learned = rep.final_mse;
        let mut best = f64::INFINITY;
        let s0 = p0.scale[0] as f64;
        for k in 1..=2000 {
            let s = s0 * k as f64 / 1000.0;
            let a = ActLayer {
                layer: 0,
                log_s: (s as f32).ln(),
                zero: p0.zero_offset,
                cmin: p0.cmin,
                cmax: p0.cmax,
            };
            let (m, _) = act_objective(&model, &block, &weights, &[a], &data, false).unwrap();
            best = best.min(m as f64);
        }
        assert!(learned <= 1.05 * best, "learned {learned} vs grid {best}");
        assert!(learned < rep.initial_mse);
        assert_eq!(q[0].1.zero_offset, p0.zero_offset);
    }
}
