//! Procedural 2-D toy datasets.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::netcore::{Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Dataset {
    /// Eight isotropic Gaussians evenly placed on a circle.
    Gaussians8 { radius: f64, std: f64 },
    /// Planar swiss roll, scaled to a radius of about 4.
    SwissRoll { noise: f64 },
}

impl Default for Dataset {
    fn default() -> Self {
        Dataset::Gaussians8 {
            radius: 4.0,
            std: 0.05,
        }
    }
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dataset::Gaussians8 { .. } => f.write_str("gaussians8"),
            Dataset::SwissRoll { .. } => f.write_str("swissroll"),
        }
    }
}

impl FromStr for Dataset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussians8" => Ok(Dataset::default()),
            "swissroll" => Ok(Dataset::SwissRoll { noise: 0.1 }),
            other => Err(Error::Config(format!("unknown dataset {other:?}"))),
        }
    }
}

const SWISS_SCALE: f64 = 0.3;

impl Dataset {
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Tensor<f32> {
        let mut data = Vec::with_capacity(2 * n);
        match *self {
            Dataset::Gaussians8 { radius, std } => {
                for _ in 0..n {
                    let k = rng.below(8) as f64;
                    let a = 2.0 * PI * k / 8.0;
                    let x = radius * a.cos() + std * rng.normal();
                    let y = radius * a.sin() + std * rng.normal();
                    data.push(x as f32);
                    data.push(y as f32);
                }
            }
            Dataset::SwissRoll { noise } => {
                for _ in 0..n {
                    let t = 1.5 * PI * (1.0 + 2.0 * rng.uniform());
                    let x = SWISS_SCALE * t * t.cos() + noise * rng.normal();
                    let y = SWISS_SCALE * t * t.sin() + noise * rng.normal();
                    data.push(x as f32);
                    data.push(y as f32);
                }
            }
        }
        Tensor::new(vec![n, 2], data).expect("dataset shape")
    }

    /// Reference points used for mode-coverage counts. For the swiss roll
    /// these are eight points evenly spaced along the curve parameter.
    pub fn modes(&self) -> Vec<[f64; 2]> {
        match *self {
            Dataset::Gaussians8 { radius, .. } => (0..8)
                .map(|k| {
                    let a = 2.0 * PI * k as f64 / 8.0;
                    [radius * a.cos(), radius * a.sin()]
                })
                .collect(),
            Dataset::SwissRoll { .. } => (0..8)
                .map(|k| {
                    let t = 1.5 * PI * (1.0 + 2.0 * (k as f64 + 0.5) / 8.0);
                    [SWISS_SCALE * t * t.cos(), SWISS_SCALE * t * t.sin()]
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixture_is_seeded_and_centered_on_circle() {
        let d = Dataset::default();
        let a = d.sample(2000, &mut Rng::new(1));
        let b = d.sample(2000, &mut Rng::new(1));
        assert_eq!(a, b);
        let mean_r: f64 = (0..2000)
            .map(|i| {
                let r = a.row(i);
                ((r[0] as f64).powi(2) + (r[1] as f64).powi(2)).sqrt()
            })
            .sum::<f64>()
            / 2000.0;
        assert!((mean_r - 4.0).abs() < 0.2, "{mean_r}");
    }

    #[test]
    fn parse_names() {
        assert_eq!(
            "gaussians8".parse::<Dataset>().unwrap().to_string(),
            "gaussians8"
        );
        assert_eq!(
            "swissroll".parse::<Dataset>().unwrap().to_string(),
            "swissroll"
        );
        assert!("mnist".parse::<Dataset>().is_err());
        assert_eq!(Dataset::SwissRoll { noise: 0.1 }.modes().len(), 8);
    }
}
