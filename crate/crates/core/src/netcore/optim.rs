use super::tensor::{Real, Tensor};

/// Adam with bias correction. Moment buffers are created lazily to match the
/// parameter tensors passed on the first step.
#[derive(Clone, Debug)]
pub struct Adam<T: Real> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates each parameter in place from its gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>]) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        self.step += 1;
        let b1 = T::from_f64_lossy(self.beta1);
        let b2 = T::from_f64_lossy(self.beta2);
        let one = T::one();
        let bc1 = T::from_f64_lossy(1.0 - self.beta1.powi(self.step as i32));
        let bc2 = T::from_f64_lossy(1.0 - self.beta2.powi(self.step as i32));
        let lr = T::from_f64_lossy(self.lr);
        let eps = T::from_f64_lossy(self.eps);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (k, (w, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = b1 * m[k] + (one - b1) * gk;
                v[k] = b2 * v[k] + (one - b2) * gk * gk;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                *w = *w - lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_quadratic() {
        let mut x = Tensor::<f64>::new(vec![2], vec![3.0, -2.0]).unwrap();
        let mut opt = Adam::new(0.05);
        for _ in 0..2000 {
            let g = x.scale(2.0);
            opt.step(&mut [&mut x], &[&g]);
        }
        assert!(x.max_abs() < 1e-3, "{x:?}");
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let mut x = Tensor::<f32>::new(vec![2], vec![0.3, -0.7]).unwrap();
        let before = x.clone();
        let mut opt = Adam::new(0.0);
        let g = Tensor::new(vec![2], vec![1.0, 5.0]).unwrap();
        opt.step(&mut [&mut x], &[&g]);
        assert_eq!(x, before);
    }
}
