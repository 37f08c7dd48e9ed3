//! Counter-based, splittable random streams.
//!
//! A stream is identified by `(seed, stream_id)`; the ChaCha block counter
//! advances as values are drawn. Two streams with the same identity produce
//! the same sequence regardless of what other streams did in between, which
//! is what makes parallel dropout passes reproducible.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self { seed, stream_id, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Number of 32-bit words consumed so far.
    pub fn counter(&self) -> u128 {
        self.rng.get_word_pos()
    }

    /// Child stream keyed by `label`. Independent of how much of `self` has
    /// been consumed.
    pub fn derive(&self, label: u64) -> RngStream {
        let child_seed = splitmix64(self.seed ^ splitmix64(self.stream_id.wrapping_add(0xA5A5_5A5A)));
        RngStream::new(child_seed, label)
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn sample<T, D: Distribution<T>>(&mut self, dist: &D) -> T {
        dist.sample(&mut self.rng)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// I.i.d. Gaussian tensor drawn from `stream`.
pub fn normal_sample(stream: &mut RngStream, shape: &[usize], mean: f64, std: f64) -> Result<Tensor> {
    if !(std >= 0.0) {
        return Err(Error::invalid(format!("normal_sample: std must be >= 0, got {std}")));
    }
    let n: usize = shape.iter().product();
    let data = if std == 0.0 {
        vec![mean; n]
    } else {
        (0..n).map(|_| mean + std * stream.normal()).collect()
    };
    Tensor::new(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_identity_same_sequence() {
        let mut a = RngStream::new(7, 3);
        let mut b = RngStream::new(7, 3);
        let xa: Vec<u64> = (0..16).map(|_| a.next_u64()).collect();
        let xb: Vec<u64> = (0..16).map(|_| b.next_u64()).collect();
        assert_eq!(xa, xb);
        let mut c = RngStream::new(7, 4);
        let xc: Vec<u64> = (0..16).map(|_| c.next_u64()).collect();
        assert_ne!(xa, xc);
    }

    #[test]
    fn derive_ignores_parent_position() {
        let a = RngStream::new(11, 0);
        let mut b = a.clone();
        b.uniform();
        let mut da = a.derive(5);
        let mut db = b.derive(5);
        assert_eq!(da.next_u64(), db.next_u64());
        assert_ne!(a.derive(5).next_u64(), a.derive(6).next_u64());
    }

    #[test]
    fn zero_std_is_constant() {
        let mut s = RngStream::new(1, 1);
        let t = normal_sample(&mut s, &[3, 4], 2.5, 0.0).unwrap();
        assert!(t.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn negative_std_rejected() {
        let mut s = RngStream::new(1, 1);
        assert!(normal_sample(&mut s, &[2], 0.0, -1.0).is_err());
    }

    #[test]
    fn moments_of_large_sample() {
        let mut s = RngStream::new(2024, 0);
        let t = normal_sample(&mut s, &[100_000], 0.0, 1.0).unwrap();
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn reproducible_tensors() {
        let a = normal_sample(&mut RngStream::new(9, 9), &[5, 5], 0.0, 1.0).unwrap();
        let b = normal_sample(&mut RngStream::new(9, 9), &[5, 5], 0.0, 1.0).unwrap();
        assert_eq!(a.data(), b.data());
    }
}
