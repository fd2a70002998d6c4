//! Seeded random streams.
//!
//! All randomness in the crate (initialization, feedback matrices, batch
//! order, reconstruction noise) is drawn from an [`RngStream`]. The stream is
//! ChaCha8, whose output is specified bit-for-bit independently of platform.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
}

/// SplitMix64 finalizer, used to derive independent child seeds.
pub fn mix_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// A fresh stream whose seed is derived from this stream's seed and `tag`.
    /// Does not advance `self`.
    pub fn child(&self, tag: u64) -> Self {
        Self::new(mix_seed(self.seed, tag))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.random()
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// I.i.d. zero-mean Gaussian tensor.
    pub fn normal<T: Scalar>(&mut self, shape: &[usize], stddev: f64) -> Result<Tensor<T>> {
        if !(stddev > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "normal stddev must be positive, got {stddev}"
            )));
        }
        Tensor::from_fn(shape, |_| T::lit(stddev * self.standard_normal()))
    }

    /// Like [`normal`](Self::normal) but accepts `stddev == 0` (all zeros,
    /// stream not advanced).
    pub fn noise<T: Scalar>(&mut self, shape: &[usize], stddev: f64) -> Result<Tensor<T>> {
        if stddev == 0.0 {
            return Tensor::zeros(shape);
        }
        self.normal(shape, stddev)
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut self.rng);
        idx
    }
}
