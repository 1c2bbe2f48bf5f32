//! Seeded, platform-stable random numbers.
//!
//! Backed by ChaCha8 (`rand_chacha`), whose output stream is fixed by the
//! seed alone. Child streams are derived with [`Rng::derive`]: the child seed
//! is the SplitMix64 finalizer applied to `seed ^ (stream * golden)`, so
//! workers seeded from the same parent never share a stream.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of child stream `stream` of `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator for a numbered sub-stream.
    pub fn derive(&self, stream: u64) -> Self {
        Self::new(derive_seed(self.seed, stream))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        self.inner.random()
    }

    pub fn uniform_f64(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(rand_distr::StandardNormal)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    pub fn normal<T: Scalar>(&mut self, shape: &[usize], mean: f64, std: f64) -> Result<Tensor<T>> {
        if !(std >= 0.0) {
            return Err(invalid(
                "rng_normal",
                format!("std must be >= 0, got {std}"),
            ));
        }
        let mut t = Tensor::zeros(shape)?;
        let dist = Normal::new(mean, std).map_err(|e| invalid("rng_normal", e.to_string()))?;
        for v in t.data_mut() {
            *v = T::from_f64(dist.sample(&mut self.inner));
        }
        Ok(t)
    }

    pub fn uniform<T: Scalar>(&mut self, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor<T>> {
        if !(lo <= hi) {
            return Err(invalid("rng_uniform", format!("lo {lo} > hi {hi}")));
        }
        let mut t = Tensor::zeros(shape)?;
        for v in t.data_mut() {
            *v = T::from_f64(self.uniform_f64(lo, hi));
        }
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_std_is_constant() {
        let t: Tensor = Rng::new(7).normal(&[4], 0.0, 0.0).unwrap();
        assert_eq!(t.data(), &[0.0; 4]);
    }

    #[test]
    fn same_seed_same_stream() {
        let a: Tensor = Rng::new(11).normal(&[64], 0.0, 1.0).unwrap();
        let b: Tensor = Rng::new(11).normal(&[64], 0.0, 1.0).unwrap();
        assert!(a.bitwise_eq(&b));
        let mut r1 = Rng::new(3);
        let mut r2 = Rng::new(3);
        for _ in 0..10_000 {
            assert_eq!(r1.next_u64(), r2.next_u64());
        }
    }

    #[test]
    fn normal_sample_mean() {
        let t: Tensor<f64> = Rng::new(5).normal(&[100_000], 2.0, 1.0).unwrap();
        assert!((t.mean() - 2.0).abs() < 0.02);
    }

    #[test]
    fn derived_streams_differ() {
        let r = Rng::new(1);
        assert_ne!(r.derive(0).seed(), r.derive(1).seed());
        assert_eq!(r.derive(5).seed(), Rng::new(1).derive(5).seed());
    }

    #[test]
    fn bad_parameters_rejected() {
        assert!(Rng::new(0).normal::<f32>(&[2], 0.0, -1.0).is_err());
        assert!(Rng::new(0).uniform::<f32>(&[2], 1.0, 0.0).is_err());
    }
}
