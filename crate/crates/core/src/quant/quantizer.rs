//! Uniform affine fake quantization.
//!
//! `q(w) = s * (clip(round(w/s + z), c_min, c_max) - z)` with `round` half
//! away from zero. In adaptive-rounding mode the rounding is replaced by
//! `floor(w/s + z) + h(V)`, `h` the rectified sigmoid.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::netcore::tape::{round_half_away, soft_round};
use crate::netcore::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Granularity {
    #[default]
    PerChannel,
    PerTensor,
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Granularity::PerChannel => "per-channel",
            Granularity::PerTensor => "per-tensor",
        })
    }
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-channel" => Ok(Granularity::PerChannel),
            "per-tensor" => Ok(Granularity::PerTensor),
            other => Err(Error::Config(format!("unknown granularity {other:?}"))),
        }
    }
}

/// How continuous values are mapped onto the integer grid.
#[derive(Clone, Debug, PartialEq)]
pub enum Rounding {
    /// Round half away from zero.
    Nearest,
    /// `floor + h(V)` with learnable `V` of the weight's shape.
    AdaRound { v: Tensor<f32> },
    /// `floor + up` with hard per-element decisions (collapsed AdaRound).
    Fixed { up: Vec<bool> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizerParams {
    pub bits: u32,
    /// One entry per tensor, or one per output channel (row).
    pub scale: Vec<f32>,
    pub cmin: i32,
    pub cmax: i32,
    pub zero_offset: i32,
    pub rounding: Rounding,
}

/// Signed symmetric integer range for `bits`.
pub fn symmetric_range(bits: u32) -> (i32, i32) {
    let half = 1i64 << (bits - 1);
    (-half as i32, (half - 1) as i32)
}

/// Unsigned range `[0, 2^bits - 1]` used by asymmetric activation quantizers.
pub fn unsigned_range(bits: u32) -> (i32, i32) {
    (0, ((1i64 << bits) - 1) as i32)
}

fn check_bits(bits: u32) -> Result<()> {
    if !(2..=16).contains(&bits) {
        return Err(Error::Param(format!("bit width {bits} outside 2..=16")));
    }
    Ok(())
}

impl QuantizerParams {
    pub fn symmetric(bits: u32, scale: Vec<f32>) -> Result<Self> {
        check_bits(bits)?;
        let (cmin, cmax) = symmetric_range(bits);
        let p = QuantizerParams {
            bits,
            scale,
            cmin,
            cmax,
            zero_offset: 0,
            rounding: Rounding::Nearest,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn asymmetric(bits: u32, scale: f32, zero_offset: i32) -> Result<Self> {
        check_bits(bits)?;
        let (cmin, cmax) = unsigned_range(bits);
        let p = QuantizerParams {
            bits,
            scale: vec![scale],
            cmin,
            cmax,
            zero_offset,
            rounding: Rounding::Nearest,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cmin >= self.cmax {
            return Err(Error::Param(format!(
                "empty clip range [{}, {}]",
                self.cmin, self.cmax
            )));
        }
        if self.scale.is_empty() {
            return Err(Error::Param("quantizer has no scale".into()));
        }
        if let Some(s) = self.scale.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::Param(format!("scale must be positive, got {s}")));
        }
        Ok(())
    }

    /// Scale applying to flat element `k` of a tensor with `cols` columns.
    #[inline]
    pub fn scale_at(&self, k: usize, cols: usize) -> f32 {
        if self.scale.len() == 1 {
            self.scale[0]
        } else {
            self.scale[k / cols]
        }
    }

    /// Integer grid code of each element under the current rounding mode.
    pub fn codes(&self, w: &Tensor<f32>) -> Result<Vec<i32>> {
        self.validate()?;
        let cols = w.cols().max(1);
        if self.scale.len() != 1 && self.scale.len() != w.rows() {
            return Err(Error::Shape(format!(
                "{} scales for {} channels",
                self.scale.len(),
                w.rows()
            )));
        }
        let z = self.zero_offset as f64;
        let (lo, hi) = (self.cmin as f64, self.cmax as f64);
        let up: Box<dyn Fn(usize) -> Result<f64>> = match &self.rounding {
            Rounding::Nearest => Box::new(|_| Ok(f64::NAN)),
            Rounding::AdaRound { v } => {
                v.check_same_shape(w)?;
                Box::new(move |k| Ok(soft_round(v.data()[k] as f64)))
            }
            Rounding::Fixed { up } => {
                if up.len() != w.len() {
                    return Err(Error::Shape("rounding mask length mismatch".into()));
                }
                Box::new(move |k| Ok(if up[k] { 1.0 } else { 0.0 }))
            }
        };
        let mut out = Vec::with_capacity(w.len());
        for (k, &wv) in w.data().iter().enumerate() {
            let s = self.scale_at(k, cols) as f64;
            let u = wv as f64 / s + z;
            let q = match self.rounding {
                Rounding::Nearest => round_half_away(u),
                _ => u.floor() + up(k)?,
            };
            out.push(q.max(lo).min(hi) as i32);
        }
        Ok(out)
    }
}

/// Fake-quantizes `w` (rank 2 for per-channel scales, any rank otherwise).
pub fn quantize_dequantize<T: Real>(w: &Tensor<T>, p: &QuantizerParams) -> Result<Tensor<T>> {
    p.validate()?;
    let cols = w.cols().max(1);
    if p.scale.len() != 1 && p.scale.len() != w.rows() {
        return Err(Error::Shape(format!(
            "{} scales for {} channels",
            p.scale.len(),
            w.rows()
        )));
    }
    let z = T::from_i32(p.zero_offset).unwrap();
    let (lo, hi) = (T::from_i32(p.cmin).unwrap(), T::from_i32(p.cmax).unwrap());
    let mut out = Tensor::zeros(w.shape());
    match &p.rounding {
        Rounding::Nearest => {
            for (k, (o, &wv)) in out.data_mut().iter_mut().zip(w.data()).enumerate() {
                let s = T::from_f32(p.scale_at(k, cols)).unwrap();
                let q = round_half_away(wv / s + z).max(lo).min(hi);
                *o = s * (q - z);
            }
        }
        Rounding::AdaRound { v } => {
            if v.shape() != w.shape() {
                return Err(Error::Shape(
                    "rounding variables must match weight shape".into(),
                ));
            }
            for (k, (o, &wv)) in out.data_mut().iter_mut().zip(w.data()).enumerate() {
                let s = T::from_f32(p.scale_at(k, cols)).unwrap();
                let h = soft_round(T::from_f32(v.data()[k]).unwrap());
                let q = ((wv / s + z).floor() + h).max(lo).min(hi);
                *o = s * (q - z);
            }
        }
        Rounding::Fixed { up } => {
            if up.len() != w.len() {
                return Err(Error::Shape("rounding mask length mismatch".into()));
            }
            for (k, (o, &wv)) in out.data_mut().iter_mut().zip(w.data()).enumerate() {
                let s = T::from_f32(p.scale_at(k, cols)).unwrap();
                let h = if up[k] { T::one() } else { T::zero() };
                let q = ((wv / s + z).floor() + h).max(lo).min(hi);
                *o = s * (q - z);
            }
        }
    }
    Ok(out)
}

fn channel_max_abs(w: &Tensor<f32>, gran: Granularity) -> Vec<f32> {
    match gran {
        Granularity::PerTensor => vec![w.max_abs()],
        Granularity::PerChannel => (0..w.rows())
            .map(|i| w.row(i).iter().fold(0.0f32, |m, v| m.max(v.abs())))
            .collect(),
    }
}

/// Symmetric min-max scale `max|w| / c_max` per channel; an all-zero channel
/// gets scale 1.
pub fn init_scale_minmax(w: &Tensor<f32>, bits: u32, gran: Granularity) -> Result<QuantizerParams> {
    if w.is_empty() {
        return Err(Error::Param(
            "cannot initialize a scale from an empty tensor".into(),
        ));
    }
    check_bits(bits)?;
    let (_, cmax) = symmetric_range(bits);
    let scale = channel_max_abs(w, gran)
        .into_iter()
        .map(|m| if m > 0.0 { m / cmax as f32 } else { 1.0 })
        .collect();
    QuantizerParams::symmetric(bits, scale)
}

/// Searches the shrinking candidates `s_i = s_minmax (1 - i / (2n))`,
/// `i = 0..n`, per channel and keeps the one with the least squared error.
/// Ties keep the smallest `i`.
pub fn init_scale_mse(
    w: &Tensor<f32>,
    bits: u32,
    gran: Granularity,
    n_candidates: usize,
) -> Result<QuantizerParams> {
    if n_candidates == 0 {
        return Err(Error::Param("need at least one scale candidate".into()));
    }
    let base = init_scale_minmax(w, bits, gran)?;
    let (lo, hi) = (base.cmin as f32, base.cmax as f32);
    let groups: Vec<&[f32]> = match gran {
        Granularity::PerTensor => vec![w.data()],
        Granularity::PerChannel => (0..w.rows()).map(|i| w.row(i)).collect(),
    };
    let mut scale = Vec::with_capacity(groups.len());
    for (g, &s0) in groups.iter().zip(&base.scale) {
        let mut best = (f64::INFINITY, s0);
        for i in 0..n_candidates {
            let s = s0 * (1.0 - i as f32 / (2 * n_candidates) as f32);
            let err: f64 = g
                .iter()
                .map(|&x| {
                    let q = round_half_away(x / s).max(lo).min(hi) * s;
                    ((x - q) as f64).powi(2)
                })
                .sum();
            if err < best.0 {
                best = (err, s);
            }
        }
        scale.push(best.1);
    }
    QuantizerParams::symmetric(bits, scale)
}

/// Asymmetric activation quantizer covering `[min(lo, 0), max(hi, 0)]`.
pub fn init_activation_minmax(lo: f32, hi: f32, bits: u32) -> Result<QuantizerParams> {
    check_bits(bits)?;
    let (lo, hi) = (lo.min(0.0), hi.max(0.0));
    let (_, qmax) = unsigned_range(bits);
    let range = hi - lo;
    if !(range > 0.0) || !range.is_finite() {
        return QuantizerParams::asymmetric(bits, 1.0, 0);
    }
    let s = range / qmax as f32;
    let z = round_half_away(-lo / s).clamp(0.0, qmax as f32) as i32;
    QuantizerParams::asymmetric(bits, s, z)
}
