//! Algorithm-1 driver: calibration set, weight reconstruction, then
//! activation step sizes.

use log::info;

use super::adaround::{reconstruct_weights, AdaRoundOptions, BlockReport};
use super::blocks::{capture_block_data, partition_blocks, ReconstructionBlock};
use super::dataset::{build_for_strategy, CalibStrategy, CalibrationSet};
use super::lsq::{calibrate_activations, LsqOptions};
use crate::diffusion::{NoiseSchedule, SamplerPlan};
use crate::error::{Error, Result};
use crate::netcore::{NoisePredictor, Rng, Tensor};
use crate::quant::{QuantConfig, QuantizedModel, QuantizerParams, ScaleRule, Slot};

#[derive(Clone, Debug, PartialEq)]
pub struct CalibOptions {
    pub adaround: AdaRoundOptions,
    pub lsq: LsqOptions,
    /// Fraction of the calibration set held out for reporting.
    pub holdout: f64,
    /// Candidate count of the MSE scale search used to initialize weights.
    pub scale_candidates: usize,
}

impl Default for CalibOptions {
    fn default() -> Self {
        CalibOptions {
            adaround: AdaRoundOptions::default(),
            lsq: LsqOptions::default(),
            holdout: 0.1,
            scale_candidates: 100,
        }
    }
}

impl CalibOptions {
    /// Same settings with `iters` optimizer steps per block in both phases.
    pub fn with_iters(mut self, iters: usize) -> Self {
        self.adaround.iters = iters;
        self.lsq.iters = iters;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibReport {
    pub weight_blocks: Vec<BlockReport>,
    pub act_blocks: Vec<BlockReport>,
    pub train_rows: usize,
    pub held_rows: usize,
}

/// Output of [`qdiffusion_calibrate`].
#[derive(Clone, Debug)]
pub struct Calibrated {
    pub model: QuantizedModel,
    pub report: CalibReport,
    pub set: CalibrationSet,
}

type Rows<'a> = (&'a Tensor<f32>, &'a [usize]);

/// Reconstructs the weight quantizers of one block against the
/// full-precision block output. Inputs are computed through the already
/// quantized prefix (weights only), so blocks must be visited in order.
pub fn adaround_reconstruct_block(
    qm: &mut QuantizedModel,
    block: &ReconstructionBlock,
    train: Rows<'_>,
    held: Option<Rows<'_>>,
    opts: &AdaRoundOptions,
    rng: &mut Rng,
) -> Result<BlockReport> {
    if train.0.rows() == 0 {
        return Err(Error::Param("calibration set is empty".into()));
    }
    let data = capture_block_data(qm, block, train.0, train.1, false)?;
    let held_data = match held {
        Some((x, t)) if x.rows() > 0 => Some(capture_block_data(qm, block, x, t, false)?),
        _ => None,
    };
    let init: Vec<(usize, QuantizerParams)> = block
        .layers
        .iter()
        .filter_map(|&l| match qm.weight_slot(l) {
            Slot::Ready(p) => Some(Ok((l, p.clone()))),
            Slot::Uninit { .. } => Some(Err(Error::State(format!(
                "weight quantizer of {} is not initialized",
                qm.base().layers()[l].name
            )))),
            Slot::Bypass => None,
        })
        .collect::<Result<_>>()?;
    let (params, report) = reconstruct_weights(
        qm.base(),
        block,
        &init,
        &data,
        held_data.as_ref(),
        opts,
        rng,
    )?;
    for (l, p) in params {
        qm.set_weight_quantizer(l, p)?;
    }
    Ok(report)
}

/// Runs [`adaround_reconstruct_block`] over every block in execution order.
pub fn calibrate_weights(
    qm: &mut QuantizedModel,
    train: Rows<'_>,
    held: Option<Rows<'_>>,
    opts: &AdaRoundOptions,
    rng: &Rng,
) -> Result<Vec<BlockReport>> {
    partition_blocks(qm.base())
        .iter()
        .map(|block| {
            let mut brng = rng.substream(block.stage_index as u64);
            adaround_reconstruct_block(qm, block, train, held, opts, &mut brng)
        })
        .collect()
}

/// Calibrates a fresh quantized model on an existing calibration set.
pub fn calibrate_with_set(
    fp_model: &NoisePredictor<f32>,
    config: &QuantConfig,
    set: &CalibrationSet,
    opts: &CalibOptions,
    rng: &Rng,
) -> Result<(QuantizedModel, CalibReport)> {
    if set.is_empty() {
        return Err(Error::Param("calibration set is empty".into()));
    }
    let (train_idx, held_idx) = set.split_holdout(opts.holdout);
    let train = set.subset(&train_idx);
    let held = set.subset(&held_idx);
    let held_rows = (!held.is_empty()).then_some((&held.x, held.t.as_slice()));

    let mut qm = QuantizedModel::new(fp_model.clone(), config.clone())?;
    qm.init_weights(ScaleRule::Mse {
        candidates: opts.scale_candidates,
    })?;
    let weight_blocks = calibrate_weights(
        &mut qm,
        (&train.x, &train.t),
        held_rows,
        &opts.adaround,
        &rng.substream(1),
    )?;
    let act_blocks = calibrate_activations(
        &mut qm,
        (&train.x, &train.t),
        held_rows,
        &opts.lsq,
        &rng.substream(2),
    )?;
    info!(
        "calibrated on {} rows ({} held out)",
        train.len(),
        held.len()
    );
    Ok((
        qm,
        CalibReport {
            weight_blocks,
            act_blocks,
            train_rows: train.len(),
            held_rows: held.len(),
        },
    ))
}

/// End-to-end calibration: build the calibration set with `strategy`,
/// initialize weight scales by MSE search, reconstruct every block's
/// weights, then (if enabled) learn activation step sizes.
pub fn qdiffusion_calibrate(
    fp_model: &NoisePredictor<f32>,
    schedule: &NoiseSchedule,
    plan: &SamplerPlan,
    config: &QuantConfig,
    strategy: CalibStrategy,
    opts: &CalibOptions,
    rng: &Rng,
) -> Result<Calibrated> {
    let set = build_for_strategy(fp_model, schedule, plan, strategy, &rng.substream(0))?;
    let (model, report) = calibrate_with_set(fp_model, config, &set, opts, rng)?;
    Ok(Calibrated { model, report, set })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::Arch;

    fn small() -> (NoisePredictor<f32>, NoiseSchedule, SamplerPlan) {
        let arch = Arch {
            width: 8,
            n_blocks: 2,
            emb_dim: 4,
            skip: Some((0, 1)),
            ..Arch::default()
        };
        (
            NoisePredictor::init(arch, &mut Rng::new(8)).unwrap(),
            NoiseSchedule::default_linear(),
            SamplerPlan::uniform(1000, 20, 0.0).unwrap(),
        )
    }

    #[test]
    fn deterministic_and_ordered() {
        let (fp, s, plan) = small();
        let cfg = QuantConfig::default();
        let opts = CalibOptions::default().with_iters(40);
        let strat = CalibStrategy::Uniform { c: 2, n: 8 };
        let a = qdiffusion_calibrate(&fp, &s, &plan, &cfg, strat, &opts, &Rng::new(3)).unwrap();
        let b = qdiffusion_calibrate(&fp, &s, &plan, &cfg, strat, &opts, &Rng::new(3)).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.report, b.report);
        assert_eq!(a.set.len(), 80);
        assert_eq!((a.report.train_rows, a.report.held_rows), (72, 8));
        assert_eq!(a.report.weight_blocks.len(), 4);
        assert_eq!(a.report.act_blocks.len(), 4);
        for r in a.report.weight_blocks.iter().chain(&a.report.act_blocks) {
            assert!(r.final_mse <= r.initial_mse);
        }
        let x = a.set.x.gather_rows(&[0, 1, 2]);
        assert!(a.model.forward(&x, &a.set.t[..3]).unwrap().all_finite());
    }

    #[test]
    fn activation_phase_leaves_weights_alone() {
        let (fp, s, plan) = small();
        let set = crate::calib::build_calibration_set(&fp, &s, &plan, 2, 8, &Rng::new(1)).unwrap();
        let mut qm = QuantizedModel::new(fp.clone(), QuantConfig::default()).unwrap();
        qm.init_weights(ScaleRule::Mse { candidates: 20 }).unwrap();
        let opts = AdaRoundOptions {
            iters: 30,
            ..Default::default()
        };
        calibrate_weights(&mut qm, (&set.x, &set.t), None, &opts, &Rng::new(2)).unwrap();
        let weights = qm.weight_slots().to_vec();
        let acts_before = qm.act_slots().to_vec();
        let lsq = LsqOptions {
            iters: 30,
            ..Default::default()
        };
        calibrate_activations(&mut qm, (&set.x, &set.t), None, &lsq, &Rng::new(3)).unwrap();
        assert_eq!(qm.weight_slots(), &weights[..]);
        assert_ne!(qm.act_slots(), &acts_before[..]);

        // And the weight phase never touches activation quantizers.
        let acts = qm.act_slots().to_vec();
        calibrate_weights(&mut qm, (&set.x, &set.t), None, &opts, &Rng::new(2)).unwrap();
        assert_eq!(qm.act_slots(), &acts[..]);
    }

    #[test]
    fn disabled_activations_are_a_no_op() {
        let (fp, s, plan) = small();
        let set = crate::calib::build_calibration_set(&fp, &s, &plan, 4, 2, &Rng::new(1)).unwrap();
        let mut qm = QuantizedModel::new(fp, QuantConfig::weights_only(4)).unwrap();
        let before = qm.clone();
        let r = calibrate_activations(
            &mut qm,
            (&set.x, &set.t),
            None,
            &LsqOptions::default(),
            &Rng::new(0),
        )
        .unwrap();
        assert!(r.is_empty());
        assert_eq!(qm, before);
    }

    #[test]
    fn empty_set_rejected() {
        let (fp, _, _) = small();
        let mut qm = QuantizedModel::new(fp.clone(), QuantConfig::default()).unwrap();
        qm.init_weights(ScaleRule::MinMax).unwrap();
        let block = &partition_blocks(&fp)[0];
        let x = Tensor::zeros(&[0, 2]);
        let err = adaround_reconstruct_block(
            &mut qm,
            block,
            (&x, &[]),
            None,
            &AdaRoundOptions::default(),
            &mut Rng::new(0),
        );
        assert!(matches!(err, Err(Error::Param(_))));
    }
}
