//! Minimal reverse-mode tape over whole tensors.
//!
//! Only the operations the network, the training loss and the calibration
//! objectives need are recorded. Every node stores its forward value; the
//! backward pass walks the node list in reverse and accumulates adjoints into
//! nodes that (transitively) depend on a parameter leaf.

use super::tensor::{r, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Rectified-sigmoid stretch constants for soft rounding.
pub const ADAROUND_ZETA: f64 = 1.1;
pub const ADAROUND_GAMMA: f64 = -0.1;

#[derive(Debug, Clone)]
enum Op<T: Real> {
    Leaf,
    /// `x · wᵀ + b`
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Silu(Var),
    Concat(Var, Var),
    /// Scalar: mean over rows of the squared L2 distance between rows.
    SqDistMean(Var, Var),
    /// Scalar: `a + k * b`.
    AddScaled {
        a: Var,
        b: Var,
        k: T,
    },
    /// Soft-rounded weight `s * clip(floor + h(v), cmin, cmax)`.
    SoftRoundWeight {
        v: Var,
        log_s: Var,
        floor: Tensor<T>,
        cmin: T,
        cmax: T,
    },
    /// Scalar rounding regularizer `Σ 1 - |2 h(v) - 1|^beta`.
    RoundReg {
        v: Var,
        beta: T,
    },
    /// Asymmetric fake quantization with a learnable log step size and a
    /// straight-through estimator for the rounding.
    ActQuant {
        x: Var,
        log_s: Var,
        zero: T,
        cmin: T,
        cmax: T,
    },
}

#[derive(Debug, Clone)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Grads<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Rectified sigmoid `clip(σ(v)(ζ-γ)+γ, 0, 1)`.
pub fn soft_round<T: Real>(v: T) -> T {
    let h = sigmoid(v) * r(ADAROUND_ZETA - ADAROUND_GAMMA) + r(ADAROUND_GAMMA);
    h.max(T::zero()).min(T::one())
}

fn soft_round_grad<T: Real>(v: T) -> T {
    let s = sigmoid(v);
    let h = s * r(ADAROUND_ZETA - ADAROUND_GAMMA) + r(ADAROUND_GAMMA);
    if h > T::zero() && h < T::one() {
        s * (T::one() - s) * r(ADAROUND_ZETA - ADAROUND_GAMMA)
    } else {
        T::zero()
    }
}

/// Round half away from zero.
#[inline]
pub fn round_half_away<T: Real>(x: T) -> T {
    x.round()
}

fn per_channel<T: Real>(log_s: &Tensor<T>, _rows: usize) -> impl Fn(usize) -> usize {
    let n = log_s.len();
    move |row| if n == 1 { 0 } else { row }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf (no adjoint is accumulated for it).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let mut y = xv.matmul_nt(wv)?;
        if let Some(b) = b {
            let bv = self.value(b);
            let cols = y.cols();
            if bv.len() != cols {
                return Err(Error::Shape(format!(
                    "bias length {} for output width {}",
                    bv.len(),
                    cols
                )));
            }
            let bd = bv.data().to_vec();
            for row in y.data_mut().chunks_mut(cols) {
                for (o, &bb) in row.iter_mut().zip(&bd) {
                    *o = *o + bb;
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(y, Op::Linear { x, w, b }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        let ng = self.ng(a);
        self.push(v, Op::Silu(a), ng)
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).concat_cols(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Concat(a, b), ng))
    }

    pub fn sq_dist_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        let m = self.value(a).mean_row_sq_dist(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::full(&[1], m), Op::SqDistMean(a, b), ng))
    }

    pub fn add_scaled(&mut self, a: Var, b: Var, k: T) -> Var {
        let v = self.scalar(a) + k * self.scalar(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::full(&[1], v), Op::AddScaled { a, b, k }, ng)
    }

    /// Soft-rounded fake-quantized weight. `w` is `[out, in]`, `v` matches it
    /// and `log_s` holds one entry per output row (or a single entry).
    pub fn soft_round_weight(
        &mut self,
        w: &Tensor<T>,
        v: Var,
        log_s: Var,
        cmin: T,
        cmax: T,
    ) -> Result<Var> {
        let vv = self.value(v);
        vv.check_same_shape(w)?;
        let ls = self.value(log_s);
        let rows = w.rows();
        if ls.len() != 1 && ls.len() != rows {
            return Err(Error::Shape(format!(
                "{} scales for {} output channels",
                ls.len(),
                rows
            )));
        }
        let ch = per_channel(ls, rows);
        let cols = w.cols();
        let mut floor = Tensor::zeros(w.shape());
        let mut out = Tensor::zeros(w.shape());
        for i in 0..rows {
            let s = ls.data()[ch(i)].exp();
            for j in 0..cols {
                let k = i * cols + j;
                let f = (w.data()[k] / s).floor();
                floor.data_mut()[k] = f;
                let q = (f + soft_round(vv.data()[k])).max(cmin).min(cmax);
                out.data_mut()[k] = s * q;
            }
        }
        let ng = self.ng(v) || self.ng(log_s);
        Ok(self.push(
            out,
            Op::SoftRoundWeight {
                v,
                log_s,
                floor,
                cmin,
                cmax,
            },
            ng,
        ))
    }

    pub fn round_reg(&mut self, v: Var, beta: T) -> Var {
        let total = self.value(v).data().iter().fold(T::zero(), |acc, &x| {
            let d = (soft_round(x) * r(2.0) - T::one()).abs();
            acc + T::one() - d.powf(beta)
        });
        let ng = self.ng(v);
        self.push(Tensor::full(&[1], total), Op::RoundReg { v, beta }, ng)
    }

    /// Fake-quantizes `x` with step `exp(log_s)` and integer `zero` offset:
    /// `s * (clip(round(x/s + zero), cmin, cmax) - zero)`.
    pub fn act_quant(&mut self, x: Var, log_s: Var, zero: T, cmin: T, cmax: T) -> Result<Var> {
        if self.value(log_s).len() != 1 {
            return Err(Error::Shape("activation step must be a scalar".into()));
        }
        let s = self.scalar(log_s).exp();
        let v = self.value(x).map(|xv| {
            let q = round_half_away(xv / s + zero).max(cmin).min(cmax);
            s * (q - zero)
        });
        let ng = self.ng(x) || self.ng(log_s);
        Ok(self.push(
            v,
            Op::ActQuant {
                x,
                log_s,
                zero,
                cmin,
                cmax,
            },
            ng,
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(&[1], T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                // Only leaves keep their adjoint.
                grads[idx] = Some(g);
                continue;
            }
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Linear { x, w, b } => {
                    if self.ng(*x) {
                        let gx = g.matmul(self.value(*w))?;
                        accumulate(&mut grads, *x, gx);
                    }
                    if self.ng(*w) {
                        let gw = g.matmul_tn(self.value(*x))?;
                        accumulate(&mut grads, *w, gw);
                    }
                    if let Some(b) = b {
                        if self.ng(*b) {
                            let cols = g.cols();
                            let mut gb = vec![T::zero(); cols];
                            for row in g.data().chunks(cols) {
                                for (acc, &v) in gb.iter_mut().zip(row) {
                                    *acc = *acc + v;
                                }
                            }
                            let shape = self.value(*b).shape().to_vec();
                            accumulate(&mut grads, *b, Tensor::new(shape, gb)?);
                        }
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Silu(a) => {
                    let xv = self.value(*a);
                    let ga = g.zip_map(xv, |gg, x| {
                        let s = sigmoid(x);
                        gg * s * (T::one() + x * (T::one() - s))
                    })?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Concat(a, b) => {
                    let ca = self.value(*a).cols();
                    let cb = self.value(*b).cols();
                    let rows = g.rows();
                    let mut ga = Vec::with_capacity(rows * ca);
                    let mut gb = Vec::with_capacity(rows * cb);
                    for row in g.data().chunks(ca + cb) {
                        ga.extend_from_slice(&row[..ca]);
                        gb.extend_from_slice(&row[ca..]);
                    }
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, Tensor::new(vec![rows, ca], ga)?);
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, Tensor::new(vec![rows, cb], gb)?);
                    }
                }
                Op::SqDistMean(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let k = g.data()[0] * r::<T>(2.0) / T::from_usize(av.rows().max(1)).unwrap();
                    let ga = av.zip_map(bv, |x, y| k * (x - y))?;
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, ga.scale(-T::one()));
                    }
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, ga);
                    }
                }
                Op::AddScaled { a, b, k } => {
                    let gv = g.data()[0];
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, Tensor::full(&[1], gv));
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, Tensor::full(&[1], gv * *k));
                    }
                }
                Op::SoftRoundWeight {
                    v,
                    log_s,
                    floor,
                    cmin,
                    cmax,
                } => {
                    let vv = self.value(*v);
                    let ls = self.value(*log_s);
                    let out = &node.value;
                    let rows = floor.rows();
                    let cols = floor.cols();
                    let ch = per_channel(ls, rows);
                    let mut gv = Tensor::zeros(vv.shape());
                    let mut gs = Tensor::zeros(ls.shape());
                    for i in 0..rows {
                        let c = ch(i);
                        let s = ls.data()[c].exp();
                        for j in 0..cols {
                            let k = i * cols + j;
                            let gk = g.data()[k];
                            let q = floor.data()[k] + soft_round(vv.data()[k]);
                            if q >= *cmin && q <= *cmax {
                                gv.data_mut()[k] = gk * s * soft_round_grad(vv.data()[k]);
                            }
                            // d(s*q)/d(log s) = s*q with q piecewise constant in s
                            gs.data_mut()[c] = gs.data()[c] + gk * out.data()[k];
                        }
                    }
                    if self.ng(*v) {
                        accumulate(&mut grads, *v, gv);
                    }
                    if self.ng(*log_s) {
                        accumulate(&mut grads, *log_s, gs);
                    }
                }
                Op::RoundReg { v, beta } => {
                    let gv0 = g.data()[0];
                    let gv = self.value(*v).map(|x| {
                        let u = soft_round(x) * r(2.0) - T::one();
                        if u == T::zero() {
                            return T::zero();
                        }
                        let du = -*beta * u.abs().powf(*beta - T::one()) * u.signum();
                        gv0 * du * r(2.0) * soft_round_grad(x)
                    });
                    accumulate(&mut grads, *v, gv);
                }
                Op::ActQuant {
                    x,
                    log_s,
                    zero,
                    cmin,
                    cmax,
                } => {
                    let xv = self.value(*x);
                    let s = self.scalar(*log_s).exp();
                    let mut gx = Tensor::zeros(xv.shape());
                    let mut gs = T::zero();
                    for (k, (&xx, &gg)) in xv.data().iter().zip(g.data()).enumerate() {
                        let code = round_half_away(xx / s + *zero);
                        if code < *cmin {
                            gs = gs + gg * s * (*cmin - *zero);
                        } else if code > *cmax {
                            gs = gs + gg * s * (*cmax - *zero);
                        } else {
                            gx.data_mut()[k] = gg;
                            gs = gs + gg * s * (code - *zero - xx / s);
                        }
                    }
                    if self.ng(*x) {
                        accumulate(&mut grads, *x, gx);
                    }
                    if self.ng(*log_s) {
                        accumulate(&mut grads, *log_s, Tensor::full(&[1], gs));
                    }
                }
            }
        }
        Ok(Grads { grads })
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], d: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), d.to_vec()).unwrap()
    }

    #[test]
    fn linear_backward_matches_hand_computation() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = tape.param(t(&[1, 2], &[3.0, -1.0]));
        let b = tape.param(t(&[1], &[0.5]));
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[1.5]);
        let target = tape.constant(t(&[1, 1], &[0.0]));
        let loss = tape.sq_dist_mean(y, target).unwrap();
        let g = tape.backward(loss).unwrap();
        // dL/dy = 2*1.5 = 3
        assert_eq!(g.get(w).unwrap().data(), &[3.0, 6.0]);
        assert_eq!(g.get(b).unwrap().data(), &[3.0]);
        assert!(g.get(x).is_none());
    }

    #[test]
    fn act_quant_exact_multiples_have_zero_step_gradient() {
        let mut tape = Tape::<f64>::new();
        let s = 0.25f64;
        let x = tape.constant(t(&[1, 3], &[0.25, -0.5, 1.0]));
        let ls = tape.param(t(&[1], &[s.ln()]));
        let q = tape.act_quant(x, ls, 0.0, -8.0, 7.0).unwrap();
        assert_eq!(tape.value(q).data(), &[0.25, -0.5, 1.0]);
        let zero = tape.constant(t(&[1, 3], &[0.0, 0.0, 0.0]));
        let loss = tape.sq_dist_mean(q, zero).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(ls).unwrap().data()[0].abs() < 1e-12);
    }

    #[test]
    fn clipped_activation_step_gradient_is_s_times_cmax() {
        let mut tape = Tape::<f64>::new();
        let s = 0.1f64;
        let x = tape.constant(t(&[1, 1], &[5.0]));
        let ls = tape.param(t(&[1], &[s.ln()]));
        let q = tape.act_quant(x, ls, 0.0, -8.0, 7.0).unwrap();
        assert!((tape.value(q).data()[0] - 0.7).abs() < 1e-12);
        // d q / d log s for a clipped element is s * c_max; use loss = q
        let zero = tape.constant(t(&[1, 1], &[0.0]));
        let sq = tape.sq_dist_mean(q, zero).unwrap();
        let g = tape.backward(sq).unwrap();
        let dq = g.get(ls).unwrap().data()[0] / (2.0 * 0.7);
        assert!((dq - s * 7.0).abs() < 1e-12);
    }

    #[test]
    fn soft_round_saturates() {
        assert_eq!(soft_round(50.0f64), 1.0);
        assert_eq!(soft_round(-50.0f64), 0.0);
        assert_eq!(soft_round_grad(50.0f64), 0.0);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(tape.backward(a).is_err());
    }
}
