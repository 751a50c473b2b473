//! Distribution-level sample quality: energy distance and mode coverage.

use crate::error::{Error, Result};
use crate::io::csv::{cell, Table};
use crate::netcore::Tensor;

pub const QUALITY_HEADER: &[&str] = &["energy_distance", "mode_coverage_min", "mode", "coverage"];

fn mean_pairwise(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let dim = a.cols();
    let mut total = 0.0f64;
    for i in 0..a.rows() {
        let x = a.row(i);
        let mut row = 0.0f64;
        for j in 0..b.rows() {
            let y = b.row(j);
            let mut d2 = 0.0f64;
            for k in 0..dim {
                let d = x[k] as f64 - y[k] as f64;
                d2 += d * d;
            }
            row += d2.sqrt();
        }
        total += row;
    }
    total / (a.rows() as f64 * b.rows() as f64)
}

/// Squared energy distance `2 E|x-y| - E|x-x'| - E|y-y'|` between two point
/// sets. All three expectations average over every ordered pair, diagonal
/// included, so identical multisets give exactly zero and the value is
/// never negative.
pub fn energy_distance(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::Param(
            "energy distance needs nonempty point sets".into(),
        ));
    }
    if a.cols() != b.cols() {
        return Err(Error::Shape(format!(
            "point dimensions differ: {} vs {}",
            a.cols(),
            b.cols()
        )));
    }
    let ab = mean_pairwise(a, b);
    let aa = mean_pairwise(a, a);
    let bb = mean_pairwise(b, b);
    Ok((2.0 * ab - aa - bb).max(0.0))
}

/// Fraction of samples whose nearest mode is each entry of `modes`.
pub fn mode_coverage(x: &Tensor<f32>, modes: &[[f64; 2]]) -> Result<Vec<f64>> {
    if modes.is_empty() || x.rows() == 0 {
        return Err(Error::Param("mode coverage needs samples and modes".into()));
    }
    if x.cols() != 2 {
        return Err(Error::Shape("mode coverage expects 2-D points".into()));
    }
    let mut counts = vec![0usize; modes.len()];
    for i in 0..x.rows() {
        let p = x.row(i);
        let nearest = modes
            .iter()
            .enumerate()
            .map(|(k, m)| {
                let dx = p[0] as f64 - m[0];
                let dy = p[1] as f64 - m[1];
                (k, dx * dx + dy * dy)
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(k, _)| k)
            .expect("modes nonempty");
        counts[nearest] += 1;
    }
    Ok(counts.iter().map(|&c| c as f64 / x.rows() as f64).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct QualityReport {
    pub energy_distance: f64,
    pub coverage: Vec<f64>,
}

impl QualityReport {
    pub fn evaluate(
        samples: &Tensor<f32>,
        reference: &Tensor<f32>,
        modes: &[[f64; 2]],
    ) -> Result<Self> {
        Ok(QualityReport {
            energy_distance: energy_distance(samples, reference)?,
            coverage: mode_coverage(samples, modes)?,
        })
    }

    pub fn coverage_min(&self) -> f64 {
        self.coverage.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// One row per mode; the first two columns repeat on every row.
    pub fn to_table(&self) -> Table {
        let mut t = Table::new(QUALITY_HEADER);
        for (k, c) in self.coverage.iter().enumerate() {
            t.push(vec![
                self.energy_distance.to_string(),
                self.coverage_min().to_string(),
                k.to_string(),
                c.to_string(),
            ]);
        }
        t
    }

    pub fn from_table(t: &Table) -> Result<Self> {
        if t.rows.is_empty() {
            return Err(Error::Csv("quality table has no rows".into()));
        }
        let energy_distance = cell(t, 0, 0)?;
        let mut coverage = Vec::with_capacity(t.rows.len());
        for i in 0..t.rows.len() {
            let k: usize = cell(t, i, 2)?;
            if k != i {
                return Err(Error::Csv(format!(
                    "row {}: mode index {k} out of order",
                    i + 1
                )));
            }
            coverage.push(cell(t, i, 3)?);
        }
        Ok(QualityReport {
            energy_distance,
            coverage,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::Dataset;
    use crate::netcore::Rng;
    use proptest::prelude::*;

    fn pts(v: &[[f32; 2]]) -> Tensor<f32> {
        Tensor::new(vec![v.len(), 2], v.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn point_masses_closed_form() {
        for d in [0.5f32, 1.0, 3.0] {
            let a = pts(&[[0.0, 0.0]; 5]);
            let b = pts(&[[d, 0.0]; 5]);
            assert!((energy_distance(&a, &b).unwrap() - 2.0 * d as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn null_value_on_mixture_draws() {
        let ds = Dataset::default();
        let a = ds.sample(4096, &mut Rng::new(1));
        let b = ds.sample(4096, &mut Rng::new(2));
        let e = energy_distance(&a, &b).unwrap();
        assert!(e < 0.05, "{e}");
    }

    #[test]
    fn bad_inputs() {
        let a = pts(&[[0.0, 0.0]]);
        let empty = Tensor::<f32>::zeros(&[0, 2]);
        assert!(energy_distance(&a, &empty).is_err());
        let c = Tensor::<f32>::zeros(&[1, 3]);
        assert!(energy_distance(&a, &c).is_err());
    }

    #[test]
    fn coverage_counts_nearest_mode() {
        let modes = [[0.0, 0.0], [10.0, 0.0]];
        let x = pts(&[[1.0, 0.0], [9.0, 1.0], [-3.0, 2.0], [0.5, 0.5]]);
        assert_eq!(mode_coverage(&x, &modes).unwrap(), vec![0.75, 0.25]);
    }

    #[test]
    fn report_table_round_trip() {
        let r = QualityReport {
            energy_distance: 0.0123,
            coverage: vec![0.125, 0.5, 0.375],
        };
        let text = r.to_table().render().unwrap();
        let back =
            QualityReport::from_table(&Table::parse(&text, QUALITY_HEADER).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    fn cloud(n: usize) -> impl Strategy<Value = Vec<[f32; 2]>> {
        prop::collection::vec([-5.0f32..5.0, -5.0f32..5.0], 1..n)
    }

    proptest! {
        #[test]
        fn symmetric_nonnegative_and_zero_on_self(a in cloud(24), b in cloud(24)) {
            let (a, b) = (pts(&a), pts(&b));
            let ab = energy_distance(&a, &b).unwrap();
            let ba = energy_distance(&b, &a).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() <= 1e-12 * (1.0 + ab));
            prop_assert_eq!(energy_distance(&a, &a).unwrap(), 0.0);
        }

        #[test]
        fn coverage_sums_to_one(a in cloud(40)) {
            let c = mode_coverage(&pts(&a), &Dataset::default().modes()).unwrap();
            prop_assert!((c.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
