//! Seeded counter-based random numbers.
//!
//! The generator is ChaCha8 (`rand_chacha::ChaCha8Rng`): a 256-bit key, a
//! 64-bit stream id and a 68-bit word counter. Output is a pure function of
//! `(key, stream, counter)`, which makes sequences identical on every
//! platform and lets independent substreams be addressed directly.
//!
//! Documented stream:
//! * `Rng::new(seed)` keys ChaCha8 with `ChaCha8Rng::seed_from_u64(seed)`
//!   on stream 0.
//! * `next_u64` takes the next 64-bit word of the keystream.
//! * `uniform()` is `(next_u64 >> 11) * 2^-53`, in `[0, 1)`.
//! * `normal()` uses Box–Muller on pairs: `u1 = 1 - uniform()` (in `(0, 1]`),
//!   `u2 = uniform()`, `r = sqrt(-2 ln u1)`, emitting `r cos(2π u2)` then
//!   `r sin(2π u2)`. The spare value is cached, so normals always come in
//!   the order cos, sin, cos, sin, ...
//! * `substream(i)` returns a generator on the same key with stream id
//!   `parent_stream * 2^20 + i + 1` when that fits in 64 bits (distinct ids
//!   give disjoint keystreams); deeper nestings rekey with
//!   `seed_from_u64(mix(key_word, stream, i))`.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use super::tensor::{Real, Tensor};

const STREAM_FANOUT_BITS: u32 = 20;

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            stream: 0,
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Independent generator number `index` derived from this one. Does not
    /// advance `self`.
    pub fn substream(&self, index: u64) -> Rng {
        let fits = index < (1 << STREAM_FANOUT_BITS)
            && self.stream < (1u64 << (64 - STREAM_FANOUT_BITS)) - 1;
        if fits {
            let stream = (self.stream << STREAM_FANOUT_BITS) + index + 1;
            let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
            inner.set_stream(stream);
            Rng {
                seed: self.seed,
                stream,
                inner,
                spare: None,
            }
        } else {
            let seed = splitmix(self.seed ^ splitmix(self.stream ^ splitmix(index)));
            Rng::new(seed)
        }
    }

    /// `n` consecutive substreams `0..n`.
    pub fn split(&self, n: usize) -> Vec<Rng> {
        (0..n as u64).map(|i| self.substream(i)).collect()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)` via rejection on the top bits.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }

    /// Fisher–Yates shuffle, walking from the last index down.
    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Standard-normal tensor of the given shape.
pub fn rng_normal<T: Real>(rng: &mut Rng, shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64_lossy(rng.normal())).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let a: Tensor<f32> = rng_normal(&mut Rng::new(0), &[2]);
        let b: Tensor<f32> = rng_normal(&mut Rng::new(0), &[2]);
        assert_eq!(a.data()[0].to_bits(), b.data()[0].to_bits());
        assert_eq!(a.data()[1].to_bits(), b.data()[1].to_bits());
    }

    #[test]
    fn first_normals_follow_documented_stream() {
        let mut raw = ChaCha8Rng::seed_from_u64(0);
        let w1 = raw.next_u64();
        let w2 = raw.next_u64();
        let u1 = 1.0 - (w1 >> 11) as f64 / (1u64 << 53) as f64;
        let u2 = (w2 >> 11) as f64 / (1u64 << 53) as f64;
        let r = (-2.0 * u1.ln()).sqrt();
        let expect = [
            r * (2.0 * std::f64::consts::PI * u2).cos(),
            r * (2.0 * std::f64::consts::PI * u2).sin(),
        ];
        let mut rng = Rng::new(0);
        assert_eq!(rng.normal(), expect[0]);
        assert_eq!(rng.normal(), expect[1]);
    }

    #[test]
    fn zero_sized_shape_is_empty() {
        let t: Tensor<f32> = rng_normal(&mut Rng::new(3), &[0, 4]);
        assert!(t.is_empty());
        assert_eq!(t.shape(), &[0, 4]);
    }

    #[test]
    fn moments_of_normal_stream() {
        let mut rng = Rng::new(12345);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!(var > 0.97 && var < 1.03, "var {var}");
    }

    #[test]
    fn substreams_differ_and_do_not_advance_parent() {
        let parent = Rng::new(9);
        let mut a = parent.substream(0);
        let mut b = parent.substream(1);
        assert_ne!(a.next_u64(), b.next_u64());
        let mut p1 = parent.clone();
        let _ = parent.substream(5);
        let mut p2 = Rng::new(9);
        assert_eq!(p1.next_u64(), p2.next_u64());
        // nested substreams are reproducible
        let mut n1 = parent.substream(3).substream(7);
        let mut n2 = Rng::new(9).substream(3).substream(7);
        assert_eq!(n1.next_u64(), n2.next_u64());
    }

    #[test]
    fn below_is_in_range() {
        let mut rng = Rng::new(1);
        for n in 1..50 {
            assert!(rng.below(n) < n);
        }
    }
}
