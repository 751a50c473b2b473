//! Activation ranges per layer and sampler step.

use crate::diffusion::{ddim_sample, NoiseSchedule, SamplerPlan};
use crate::error::{Error, Result};
use crate::io::csv::{cell, Table};
use crate::netcore::{NoisePredictor, Rng, Tensor};

pub const PROFILE_HEADER: &[&str] = &["layer", "t", "min", "p1", "p99", "max"];

/// Order statistics of one activation tensor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RangeStats {
    pub min: f32,
    pub p1: f32,
    pub p99: f32,
    pub max: f32,
}

impl RangeStats {
    pub fn range(&self) -> f64 {
        self.max as f64 - self.min as f64
    }

    /// Width of the central 98% of values.
    pub fn spread(&self) -> f64 {
        self.p99 as f64 - self.p1 as f64
    }
}

/// Percentile by linear interpolation between closest ranks of sorted data.
fn percentile(sorted: &[f32], q: f64) -> f32 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let w = pos - lo as f64;
    let v = sorted[lo] as f64 + (sorted[hi] as f64 - sorted[lo] as f64) * w;
    // Interpolation in f64 then rounding could step outside the neighbours.
    (v as f32).clamp(sorted[lo], sorted[hi])
}

pub fn range_stats(values: &[f32]) -> Result<RangeStats> {
    if values.is_empty() {
        return Err(Error::Param("range statistics of an empty tensor".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            location: "activation profile".into(),
        });
    }
    let mut s = values.to_vec();
    s.sort_by(f32::total_cmp);
    Ok(RangeStats {
        min: s[0],
        p1: percentile(&s, 0.01),
        p99: percentile(&s, 0.99),
        max: s[s.len() - 1],
    })
}

/// `cells[l][k]` summarises the output of layer `l` at the `k`-th sampler
/// step (timestep `t[k]`).
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationProfile {
    pub layers: Vec<String>,
    pub t: Vec<usize>,
    pub cells: Vec<Vec<RangeStats>>,
}

/// Per-layer statistics averaged over all steps.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerAggregate {
    pub layer: String,
    pub min: f64,
    pub p1: f64,
    pub p99: f64,
    pub max: f64,
}

impl ActivationProfile {
    pub fn aggregate(&self) -> Vec<LayerAggregate> {
        self.layers
            .iter()
            .zip(&self.cells)
            .map(|(name, row)| {
                let n = row.len() as f64;
                let mean =
                    |f: fn(&RangeStats) -> f32| row.iter().map(|c| f(c) as f64).sum::<f64>() / n;
                LayerAggregate {
                    layer: name.clone(),
                    min: mean(|c| c.min),
                    p1: mean(|c| c.p1),
                    p99: mean(|c| c.p99),
                    max: mean(|c| c.max),
                }
            })
            .collect()
    }

    /// Largest ratio between the `p99 - p1` spreads of one layer at two
    /// different steps, with the layer name and the timesteps of the wider
    /// and the narrower spread. The percentile spread is used rather than
    /// `max - min` so that a handful of extreme values does not decide it.
    pub fn max_range_ratio(&self) -> Option<(String, usize, usize, f64)> {
        let mut best: Option<(String, usize, usize, f64)> = None;
        for (name, row) in self.layers.iter().zip(&self.cells) {
            let (mut lo, mut hi) = (0, 0);
            for (k, c) in row.iter().enumerate() {
                if c.spread() < row[lo].spread() {
                    lo = k;
                }
                if c.spread() > row[hi].spread() {
                    hi = k;
                }
            }
            if row[lo].spread() <= 0.0 {
                continue;
            }
            let ratio = row[hi].spread() / row[lo].spread();
            if best.as_ref().is_none_or(|b| ratio > b.3) {
                best = Some((name.clone(), self.t[hi], self.t[lo], ratio));
            }
        }
        best
    }

    /// Rows are grouped by layer, steps in sampling order.
    pub fn to_table(&self) -> Table {
        let mut table = Table::new(PROFILE_HEADER);
        for (name, row) in self.layers.iter().zip(&self.cells) {
            for (t, c) in self.t.iter().zip(row) {
                table.push(vec![
                    name.clone(),
                    t.to_string(),
                    c.min.to_string(),
                    c.p1.to_string(),
                    c.p99.to_string(),
                    c.max.to_string(),
                ]);
            }
        }
        table
    }

    pub fn from_table(table: &Table) -> Result<Self> {
        let mut layers: Vec<String> = Vec::new();
        let mut t: Vec<usize> = Vec::new();
        let mut cells: Vec<Vec<RangeStats>> = Vec::new();
        for i in 0..table.rows.len() {
            let name = &table.rows[i][0];
            if layers.last() != Some(name) {
                if layers.contains(name) {
                    return Err(Error::Csv(format!(
                        "row {}: layer {name:?} is not contiguous",
                        i + 1
                    )));
                }
                layers.push(name.clone());
                cells.push(Vec::new());
            }
            let ti: usize = cell(table, i, 1)?;
            let k = cells.last().map_or(0, Vec::len);
            if layers.len() == 1 {
                t.push(ti);
            } else if t.get(k) != Some(&ti) {
                return Err(Error::Csv(format!(
                    "row {}: timestep {ti} does not match the first layer",
                    i + 1
                )));
            }
            let c = RangeStats {
                min: cell(table, i, 2)?,
                p1: cell(table, i, 3)?,
                p99: cell(table, i, 4)?,
                max: cell(table, i, 5)?,
            };
            cells.last_mut().expect("layer pushed").push(c);
        }
        if cells.iter().any(|row| row.len() != t.len()) {
            return Err(Error::Csv("layers cover different numbers of steps".into()));
        }
        Ok(ActivationProfile { layers, t, cells })
    }
}

/// Samples `batch` full-precision trajectories and summarises every layer's
/// post-activation output at every sampler step over the whole batch.
pub fn activation_profile(
    model: &NoisePredictor<f32>,
    schedule: &NoiseSchedule,
    plan: &SamplerPlan,
    batch: usize,
    rng: &Rng,
) -> Result<ActivationProfile> {
    if batch == 0 {
        return Err(Error::Param(
            "activation profile needs a positive batch".into(),
        ));
    }
    let traj = ddim_sample(model, schedule, plan, batch, rng, true)?;
    let layers: Vec<String> = model.layers().iter().map(|l| l.name.clone()).collect();
    let mut cells = vec![Vec::with_capacity(plan.len()); layers.len()];
    let mut t = Vec::with_capacity(plan.len());
    for (ti, x) in &traj.states {
        let (_, rec) = model.forward_with_record(x, &vec![*ti; x.rows()])?;
        for (l, act) in rec.layers.iter().enumerate() {
            cells[l].push(range_stats(act.post.data())?);
        }
        t.push(*ti);
    }
    Ok(ActivationProfile { layers, t, cells })
}

/// Range statistics of an arbitrary tensor, for callers profiling their own
/// activation streams.
pub fn tensor_stats(x: &Tensor<f32>) -> Result<RangeStats> {
    range_stats(x.data())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::{Arch, Rng};
    use proptest::prelude::*;

    #[test]
    fn percentile_oracle() {
        let v: Vec<f32> = (0..=100).map(|i| i as f32).collect();
        let s = range_stats(&v).unwrap();
        assert_eq!((s.min, s.p1, s.p99, s.max), (0.0, 1.0, 99.0, 100.0));
        let s = range_stats(&[3.0]).unwrap();
        assert_eq!((s.min, s.p1, s.p99, s.max), (3.0, 3.0, 3.0, 3.0));
    }

    #[test]
    fn zero_network_has_zero_ranges() {
        let m = NoisePredictor::<f32>::zeros(Arch::default()).unwrap();
        let plan = SamplerPlan::uniform(1000, 10, 0.0).unwrap();
        let p = activation_profile(
            &m,
            &NoiseSchedule::default_linear(),
            &plan,
            32,
            &Rng::new(0),
        )
        .unwrap();
        assert_eq!(p.layers.len(), m.layers().len());
        assert_eq!(p.t, plan.steps());
        for row in &p.cells {
            for c in row {
                assert_eq!((c.min, c.p1, c.p99, c.max), (0.0, 0.0, 0.0, 0.0));
            }
        }
        assert!(p.max_range_ratio().is_none());
    }

    #[test]
    fn profile_csv_round_trip() {
        let m = NoisePredictor::<f32>::init(Arch::default(), &mut Rng::new(2)).unwrap();
        let plan = SamplerPlan::uniform(1000, 8, 0.0).unwrap();
        let p = activation_profile(
            &m,
            &NoiseSchedule::default_linear(),
            &plan,
            50,
            &Rng::new(3),
        )
        .unwrap();
        let text = p.to_table().render().unwrap();
        assert!(text.starts_with("layer,t,min,p1,p99,max\n"));
        assert_eq!(text.lines().count(), 1 + p.layers.len() * 8);
        let back =
            ActivationProfile::from_table(&Table::parse(&text, PROFILE_HEADER).unwrap()).unwrap();
        assert_eq!(back, p);
        let agg = p.aggregate();
        assert_eq!(agg.len(), p.layers.len());
        assert!(agg
            .iter()
            .all(|a| a.min <= a.p1 && a.p1 <= a.p99 && a.p99 <= a.max));
    }

    proptest! {
        #[test]
        fn envelope_contains_percentiles(v in prop::collection::vec(-1e3f32..1e3, 1..300)) {
            let s = range_stats(&v).unwrap();
            prop_assert!(s.min <= s.p1 && s.p1 <= s.p99 && s.p99 <= s.max);
            prop_assert!(v.contains(&s.min) && v.contains(&s.max));
        }
    }
}
