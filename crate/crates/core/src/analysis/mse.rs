//! Per-timestep error between a full-precision and a quantized denoiser.

use std::fmt;
use std::str::FromStr;

use crate::diffusion::{
    ddim_sample, ddim_sample_from, sampler_noise, Denoiser, NoiseSchedule, SamplerPlan,
};
use crate::error::{Error, Result};
use crate::io::csv::{cell, Table};
use crate::netcore::Rng;

pub const CURVE_HEADER: &[&str] = &["step", "t", "mse"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CurveMode {
    /// Both models see the full-precision state at every step; the curve is
    /// the squared distance between their noise predictions.
    OpenLoop,
    /// Both models run their own trajectory from the same starting noise; the
    /// curve is the squared distance between the states after each update.
    #[default]
    ClosedLoop,
}

impl fmt::Display for CurveMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CurveMode::OpenLoop => "open-loop",
            CurveMode::ClosedLoop => "closed-loop",
        })
    }
}

impl FromStr for CurveMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "open-loop" | "open" => Ok(CurveMode::OpenLoop),
            "closed-loop" | "closed" => Ok(CurveMode::ClosedLoop),
            other => Err(Error::Config(format!("unknown curve mode {other:?}"))),
        }
    }
}

/// One mean squared distance per sampler iteration, noise end first.
#[derive(Clone, Debug, PartialEq)]
pub struct TimestepErrorCurve {
    pub mode: CurveMode,
    /// Timestep of each iteration.
    pub t: Vec<usize>,
    /// Squared Euclidean distance per sample, averaged over the batch.
    pub mse: Vec<f64>,
}

impl TimestepErrorCurve {
    pub fn len(&self) -> usize {
        self.mse.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mse.is_empty()
    }

    /// Rows are numbered from 1 in sampling order.
    pub fn to_table(&self) -> Table {
        let mut table = Table::new(CURVE_HEADER);
        for (i, (t, m)) in self.t.iter().zip(&self.mse).enumerate() {
            table.push(vec![(i + 1).to_string(), t.to_string(), m.to_string()]);
        }
        table
    }

    pub fn from_table(table: &Table, mode: CurveMode) -> Result<Self> {
        let mut t = Vec::with_capacity(table.rows.len());
        let mut mse = Vec::with_capacity(table.rows.len());
        for i in 0..table.rows.len() {
            let step: usize = cell(table, i, 0)?;
            if step != i + 1 {
                return Err(Error::Csv(format!(
                    "row {}: step {step} out of order",
                    i + 1
                )));
            }
            t.push(cell(table, i, 1)?);
            mse.push(cell(table, i, 2)?);
        }
        Ok(TimestepErrorCurve { mode, t, mse })
    }
}

fn check_topology<A: Denoiser + ?Sized, B: Denoiser + ?Sized>(a: &A, b: &B) -> Result<()> {
    if a.data_dim() != b.data_dim() {
        return Err(Error::Param(format!(
            "models differ in data dimension: {} vs {}",
            a.data_dim(),
            b.data_dim()
        )));
    }
    if let (Some(x), Some(y)) = (a.arch(), b.arch()) {
        if x != y {
            return Err(Error::Param(format!(
                "models differ in topology: {x:?} vs {y:?}"
            )));
        }
    }
    Ok(())
}

/// Error curve of `q` against `fp` over `batch` trajectories whose starting
/// noise (and per-step noise, when `eta > 0`) come from `rng`.
pub fn per_timestep_mse<A: Denoiser + ?Sized, B: Denoiser + ?Sized>(
    fp: &A,
    q: &B,
    schedule: &NoiseSchedule,
    plan: &SamplerPlan,
    batch: usize,
    rng: &Rng,
    mode: CurveMode,
) -> Result<TimestepErrorCurve> {
    check_topology(fp, q)?;
    if batch == 0 {
        return Err(Error::Param("error curve needs a positive batch".into()));
    }
    let t: Vec<usize> = plan.steps().to_vec();
    let mse = match mode {
        CurveMode::OpenLoop => {
            let traj = ddim_sample(fp, schedule, plan, batch, rng, true)?;
            traj.states
                .iter()
                .map(|(ti, x)| {
                    let a = fp.predict(x, *ti)?;
                    let b = q.predict(x, *ti)?;
                    Ok(a.mean_row_sq_dist(&b)? as f64)
                })
                .collect::<Result<Vec<_>>>()?
        }
        CurveMode::ClosedLoop => {
            let x_t = sampler_noise(rng, batch, fp.data_dim());
            let ids: Vec<u64> = (0..batch as u64).collect();
            let a = ddim_sample_from(fp, schedule, plan, x_t.clone(), 0, &ids, rng, true)?;
            let b = ddim_sample_from(q, schedule, plan, x_t, 0, &ids, rng, true)?;
            // State after iteration i is the input of iteration i + 1.
            let after = |tr: &crate::diffusion::Trajectory, i: usize| {
                if i + 1 < tr.states.len() {
                    tr.states[i + 1].1.clone()
                } else {
                    tr.final_sample.clone()
                }
            };
            (0..plan.len())
                .map(|i| Ok(after(&a, i).mean_row_sq_dist(&after(&b, i))? as f64))
                .collect::<Result<Vec<_>>>()?
        }
    };
    Ok(TimestepErrorCurve { mode, t, mse })
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties. Returns 0 when
/// either input is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}
