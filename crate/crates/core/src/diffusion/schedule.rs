use crate::error::{Error, Result};
use crate::netcore::{Real, Tensor};

/// Variance schedule of the forward process. All arrays are 1-based in `t`
/// through the accessors; `alpha_bar(0)` is defined as 1.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_vars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 {
            return Err(Error::Param(format!(
                "schedule needs at least 2 steps, got {}",
                betas.len()
            )));
        }
        if let Some((i, b)) = betas
            .iter()
            .enumerate()
            .find(|(_, &b)| !(b > 0.0 && b < 1.0))
        {
            return Err(Error::Param(format!(
                "beta_{} = {} outside (0, 1)",
                i + 1,
                b
            )));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let posterior_vars = (0..betas.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                (1.0 - prev) / (1.0 - alpha_bars[i]) * betas[i]
            })
            .collect();
        let s = NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
            posterior_vars,
        };
        s.check_invariants()?;
        Ok(s)
    }

    /// `beta_t` linearly interpolated from `beta_start` (t=1) to `beta_end`
    /// (t=T), both inclusive.
    pub fn linear(t_train: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_train < 2 {
            return Err(Error::Param(format!("T_train must be >= 2, got {t_train}")));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Param(format!(
                "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let step = (beta_end - beta_start) / (t_train - 1) as f64;
        let betas = (0..t_train)
            .map(|i| {
                if i == t_train - 1 {
                    beta_end
                } else {
                    beta_start + step * i as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    /// The default training schedule: 1000 steps, beta in [1e-4, 0.02].
    pub fn default_linear() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("default schedule is valid")
    }

    fn check_invariants(&self) -> Result<()> {
        if self.alpha_bars.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Param("alpha_bar is not strictly decreasing".into()));
        }
        if self.posterior_vars[0] != 0.0 {
            return Err(Error::Param("posterior variance at t=1 must be 0".into()));
        }
        Ok(())
    }

    /// Whether `alpha_bar(T) < 0.01`, i.e. the forward process ends close to
    /// an isotropic Gaussian.
    pub fn reaches_noise(&self) -> bool {
        self.alpha_bars[self.t_train() - 1] < 0.01
    }

    pub fn t_train(&self) -> usize {
        self.betas.len()
    }

    fn check_t(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.t_train() {
            return Err(Error::Param(format!(
                "timestep {t} outside 1..={}",
                self.t_train()
            )));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn posterior_var(&self, t: usize) -> f64 {
        self.posterior_vars[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn posterior_vars(&self) -> &[f64] {
        &self.posterior_vars
    }

    /// Forward-process sample `sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
    pub fn q_sample<T: Real>(
        &self,
        x0: &Tensor<T>,
        t: usize,
        eps: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let i = self.check_t(t)?;
        let ab = self.alpha_bars[i];
        let (a, b) = (
            T::from_f64_lossy(ab.sqrt()),
            T::from_f64_lossy((1.0 - ab).sqrt()),
        );
        x0.zip_map(eps, |x, e| a * x + b * e)
    }

    /// Row-wise forward sample with one timestep per row.
    pub fn q_sample_rows<T: Real>(
        &self,
        x0: &Tensor<T>,
        t: &[usize],
        eps: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        x0.check_same_shape(eps)?;
        if t.len() != x0.rows() {
            return Err(Error::Shape(format!(
                "{} timesteps for {} rows",
                t.len(),
                x0.rows()
            )));
        }
        let cols = x0.cols();
        let mut out = Tensor::zeros(x0.shape());
        for (row, &ti) in t.iter().enumerate() {
            let i = self.check_t(ti)?;
            let ab = self.alpha_bars[i];
            let (a, b) = (
                T::from_f64_lossy(ab.sqrt()),
                T::from_f64_lossy((1.0 - ab).sqrt()),
            );
            for j in row * cols..(row + 1) * cols {
                out.data_mut()[j] = a * x0.data()[j] + b * eps.data()[j];
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::{rng_normal, Rng};

    #[test]
    fn two_step_alpha_bars() {
        let s = NoiseSchedule::linear(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
        assert_eq!(s.posterior_var(1), 0.0);
        assert!(!s.reaches_noise());
    }

    #[test]
    fn default_schedule_terminal_alpha_bar() {
        // Independent 64-bit product of (1 - beta_i), evaluated in log space.
        let log_prod: f64 = (0..1000)
            .map(|i| (1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).ln())
            .sum();
        let expect = log_prod.exp();
        let s = NoiseSchedule::default_linear();
        assert!((s.alpha_bar(1000) - expect).abs() / expect < 1e-9);
        assert!((expect - 4.0e-5).abs() < 0.05e-5, "{expect}");
        assert!(s.reaches_noise());
    }

    #[test]
    fn bounds_rejected() {
        assert!(NoiseSchedule::linear(1, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn q_sample_limits() {
        let s = NoiseSchedule::default_linear();
        let x0 = Tensor::<f64>::new(vec![1, 2], vec![1.0, -2.0]).unwrap();
        let zero = Tensor::zeros(&[1, 2]);
        let y = s.q_sample(&x0, 300, &zero).unwrap();
        let a = s.alpha_bar(300).sqrt();
        assert_eq!(y.data(), &[a, -2.0 * a]);
        let eps = Tensor::<f64>::new(vec![1, 2], vec![0.5, 0.25]).unwrap();
        let y = s.q_sample(&zero, 300, &eps).unwrap();
        let b = (1.0 - s.alpha_bar(300)).sqrt();
        assert_eq!(y.data(), &[0.5 * b, 0.25 * b]);
        assert!(s.q_sample(&x0, 0, &zero).is_err());
        assert!(s.q_sample(&x0, 1001, &zero).is_err());
    }

    #[test]
    fn q_sample_moments() {
        let s = NoiseSchedule::default_linear();
        let t = 250;
        let n = 10_000;
        let x0 = Tensor::<f64>::new(vec![n, 1], vec![1.5; n]).unwrap();
        let eps = rng_normal::<f64>(&mut Rng::new(21), &[n, 1]);
        let y = s.q_sample(&x0, t, &eps).unwrap();
        let mean = y.sum() / n as f64;
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let ab = s.alpha_bar(t);
        assert!((mean - ab.sqrt() * 1.5).abs() / (ab.sqrt() * 1.5) < 0.05);
        assert!((var - (1.0 - ab)).abs() / (1.0 - ab) < 0.05);
    }
}
