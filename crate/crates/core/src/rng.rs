//! Deterministic random streams.
//!
//! Every stochastic step in the crate takes an explicit [`Rng`]. The generator
//! is ChaCha8 (counter based, platform independent output), seeded from a
//! `u64` and optionally split into independent streams by a `u64` stream id.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::image::Image;

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream `stream` of the generator keyed by `seed`.
    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng { seed, inner }
    }

    /// Stream keyed by a path of indices, e.g. `(epoch, batch, element)`.
    pub fn keyed(seed: u64, key: &[u64]) -> Self {
        // SplitMix64 finaliser folded over the key gives a well-spread stream id.
        let mut id = 0x9E37_79B9_7F4A_7C15u64;
        for &k in key {
            id ^= k.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(id << 6).wrapping_add(id >> 2);
            id = id.wrapping_mul(0xBF58_476D_1CE4_E5B9);
            id ^= id >> 31;
        }
        Rng::stream(seed, id)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn coin(&mut self) -> bool {
        self.inner.random::<bool>()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    pub fn uniform_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.uniform()).collect()
    }

    /// Standard normal image of the given shape.
    pub fn normal_image(&mut self, height: usize, width: usize, channels: usize) -> Image {
        let data = self.normal_vec(height * width * channels);
        Image::from_vec(height, width, channels, data).expect("shape computed from the same dims")
    }

    /// Uniform `[0,1)` image of the given shape.
    pub fn uniform_image(&mut self, height: usize, width: usize, channels: usize) -> Image {
        let data = self.uniform_vec(height * width * channels);
        Image::from_vec(height, width, channels, data).expect("shape computed from the same dims")
    }
}
