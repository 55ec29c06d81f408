use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Tensor;
use crate::error::{Error, Result};

/// Seeded, splittable random source.
///
/// Backed by ChaCha20, whose output is defined by (key, stream, counter) and
/// is identical on every platform. Child streams for layers or sweep cells
/// are derived from `(seed, index)` so they never share state.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    inner: ChaCha20Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, inner: ChaCha20Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream for task `index`; depends only on this stream's
    /// seed, never on how many values it has already produced.
    pub fn child(&self, index: u64) -> Self {
        Self::derive(self.seed, index)
    }

    pub fn derive(seed: u64, index: u64) -> Self {
        Self::new(splitmix64(splitmix64(seed) ^ splitmix64(index.wrapping_add(0x5851_F42D_4C95_7F2D))))
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        // 53 random mantissa bits
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        // Lemire-style rejection keeps the draw unbiased.
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.inner.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// i.i.d. `N(mu, sigma²)` tensor of the given shape.
pub fn gaussian(rng: &mut RngStream, mu: f64, sigma: f64, shape: &[usize]) -> Result<Tensor> {
    if !(sigma >= 0.0) || !sigma.is_finite() || !mu.is_finite() {
        return Err(Error::param(format!("gaussian: mu={mu}, sigma={sigma}")));
    }
    let n: usize = shape.iter().product();
    let data = if sigma == 0.0 { vec![mu; n] } else { (0..n).map(|_| mu + sigma * rng.standard_normal()).collect() };
    Tensor::new(shape.to_vec(), data)
}
