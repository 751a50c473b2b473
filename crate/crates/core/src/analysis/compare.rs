//! Side-by-side evaluation of calibration strategies.

use super::mse::{per_timestep_mse, CurveMode, TimestepErrorCurve};
use super::quality::QualityReport;
use crate::calib::{
    build_calibration_set, qdiffusion_calibrate, CalibOptions, CalibStrategy, StrategyKind,
};
use crate::diffusion::{ddim_sample, NoiseSchedule, SamplerPlan};
use crate::error::{Error, Result};
use crate::io::csv::{cell, Table};
use crate::netcore::{NoisePredictor, Rng, Tensor};
use crate::quant::{QuantConfig, QuantizedModel, ScaleRule};

pub const COMPARE_HEADER: &[&str] = &[
    "strategy",
    "bits_w",
    "bits_a",
    "energy_distance",
    "mode_coverage_min",
    "final_mse",
];

#[derive(Clone, Debug)]
pub struct CompareOptions {
    pub quant: QuantConfig,
    /// Interval and per-step count of the uniform strategy. The single-step
    /// strategy draws the same total from the first iteration.
    pub c: usize,
    pub n: usize,
    pub calib: CalibOptions,
    pub sample_count: usize,
    pub mse_batch: usize,
    pub reference: Tensor<f32>,
    pub modes: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StrategyResult {
    pub strategy: StrategyKind,
    pub bits_w: u32,
    pub bits_a: u32,
    pub quality: QualityReport,
    pub curve: TimestepErrorCurve,
}

impl StrategyResult {
    pub fn final_mse(&self) -> f64 {
        self.curve.mse.last().copied().unwrap_or(0.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    /// Quality of the full-precision model on the same starting noise.
    pub baseline: QualityReport,
    pub rows: Vec<StrategyResult>,
}

impl Comparison {
    pub fn get(&self, kind: StrategyKind) -> Option<&StrategyResult> {
        self.rows.iter().find(|r| r.strategy == kind)
    }

    pub fn to_table(&self) -> Table {
        let mut t = Table::new(COMPARE_HEADER);
        for r in &self.rows {
            t.push(vec![
                r.strategy.to_string(),
                r.bits_w.to_string(),
                r.bits_a.to_string(),
                r.quality.energy_distance.to_string(),
                r.quality.coverage_min().to_string(),
                r.final_mse().to_string(),
            ]);
        }
        t
    }
}

/// Parsed row of a comparison table.
#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub strategy: StrategyKind,
    pub bits_w: u32,
    pub bits_a: u32,
    pub energy_distance: f64,
    pub mode_coverage_min: f64,
    pub final_mse: f64,
}

pub fn parse_comparison(table: &Table) -> Result<Vec<CompareRow>> {
    (0..table.rows.len())
        .map(|i| {
            Ok(CompareRow {
                strategy: table.rows[i][0].parse()?,
                bits_w: cell(table, i, 1)?,
                bits_a: cell(table, i, 2)?,
                energy_distance: cell(table, i, 3)?,
                mode_coverage_min: cell(table, i, 4)?,
                final_mse: cell(table, i, 5)?,
            })
        })
        .collect()
}

/// The uncalibrated baseline: min-max weight scales with nearest rounding,
/// and min-max activation ranges over `set_x` when activations are quantized.
pub fn minmax_quantize(
    fp: &NoisePredictor<f32>,
    config: &QuantConfig,
    set_x: &Tensor<f32>,
    set_t: &[usize],
) -> Result<QuantizedModel> {
    let mut qm = QuantizedModel::new(fp.clone(), config.clone())?;
    qm.init_weights(ScaleRule::MinMax)?;
    if config.act_quant_enabled() {
        qm.init_activations_minmax(set_x, set_t)?;
    }
    Ok(qm)
}

/// Quantizes `fp` three ways (no calibration, single-step calibration,
/// uniform-interval calibration) and evaluates samples and closed-loop error
/// curves of each. Every strategy sees the same calibration seed, the same
/// sampling noise and the same curve noise.
pub fn compare_strategies(
    fp: &NoisePredictor<f32>,
    schedule: &NoiseSchedule,
    plan: &SamplerPlan,
    opts: &CompareOptions,
    rng: &Rng,
) -> Result<Comparison> {
    if opts.reference.rows() == 0 {
        return Err(Error::Param("comparison needs reference points".into()));
    }
    let calib_rng = rng.substream(0);
    let sample_rng = rng.substream(1);
    let curve_rng = rng.substream(2);

    let fp_samples = ddim_sample(fp, schedule, plan, opts.sample_count, &sample_rng, false)?;
    let baseline = QualityReport::evaluate(&fp_samples.final_sample, &opts.reference, &opts.modes)?;

    let uniform = CalibStrategy::Uniform {
        c: opts.c,
        n: opts.n,
    };
    let total = opts.n * (plan.len() / opts.c);
    let single = CalibStrategy::SingleStep {
        iteration: 1,
        count: total,
    };

    let mut rows = Vec::with_capacity(3);
    for kind in [
        StrategyKind::None,
        StrategyKind::SingleStep,
        StrategyKind::Uniform,
    ] {
        log::info!("compare: calibrating with strategy {kind}");
        let qm = match kind {
            StrategyKind::None => {
                let set = build_calibration_set(
                    fp,
                    schedule,
                    plan,
                    opts.c,
                    opts.n,
                    &calib_rng.substream(0),
                )?;
                minmax_quantize(fp, &opts.quant, &set.x, &set.t)?
            }
            StrategyKind::SingleStep => {
                qdiffusion_calibrate(
                    fp,
                    schedule,
                    plan,
                    &opts.quant,
                    single,
                    &opts.calib,
                    &calib_rng,
                )?
                .model
            }
            StrategyKind::Uniform => {
                qdiffusion_calibrate(
                    fp,
                    schedule,
                    plan,
                    &opts.quant,
                    uniform,
                    &opts.calib,
                    &calib_rng,
                )?
                .model
            }
        };
        let samples = ddim_sample(&qm, schedule, plan, opts.sample_count, &sample_rng, false)?;
        let quality = QualityReport::evaluate(&samples.final_sample, &opts.reference, &opts.modes)?;
        let curve = per_timestep_mse(
            fp,
            &qm,
            schedule,
            plan,
            opts.mse_batch,
            &curve_rng,
            CurveMode::ClosedLoop,
        )?;
        log::info!(
            "compare: {kind} energy distance {:.5} (fp32 {:.5})",
            quality.energy_distance,
            baseline.energy_distance
        );
        rows.push(StrategyResult {
            strategy: kind,
            bits_w: opts.quant.bits_w,
            bits_a: opts.quant.bits_a,
            quality,
            curve,
        });
    }
    Ok(Comparison { baseline, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::Dataset;
    use crate::netcore::Arch;

    #[test]
    fn small_comparison_is_reproducible_and_well_formed() {
        let arch = Arch {
            width: 8,
            n_blocks: 2,
            emb_dim: 4,
            skip: Some((0, 1)),
            ..Arch::default()
        };
        let fp = NoisePredictor::init(arch, &mut Rng::new(5)).unwrap();
        let plan = SamplerPlan::uniform(1000, 10, 0.0).unwrap();
        let ds = Dataset::default();
        let opts = CompareOptions {
            quant: QuantConfig::weights_only(4),
            c: 2,
            n: 8,
            calib: CalibOptions::default().with_iters(20),
            sample_count: 64,
            mse_batch: 8,
            reference: ds.sample(128, &mut Rng::new(1)),
            modes: ds.modes(),
        };
        let s = NoiseSchedule::default_linear();
        let a = compare_strategies(&fp, &s, &plan, &opts, &Rng::new(9)).unwrap();
        let b = compare_strategies(&fp, &s, &plan, &opts, &Rng::new(9)).unwrap();
        assert_eq!(a, b);
        let kinds: Vec<_> = a.rows.iter().map(|r| r.strategy).collect();
        assert_eq!(
            kinds,
            [
                StrategyKind::None,
                StrategyKind::SingleStep,
                StrategyKind::Uniform
            ]
        );
        let text = a.to_table().render().unwrap();
        assert!(text
            .starts_with("strategy,bits_w,bits_a,energy_distance,mode_coverage_min,final_mse\n"));
        let parsed = parse_comparison(&Table::parse(&text, COMPARE_HEADER).unwrap()).unwrap();
        assert_eq!(parsed.len(), 3);
        assert_eq!(parsed[2].bits_w, 4);
        assert_eq!(parsed[2].energy_distance, a.rows[2].quality.energy_distance);
    }
}
