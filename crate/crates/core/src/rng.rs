//! Seeded, splittable randomness.
//!
//! [`Rng`] wraps a ChaCha8 stream cipher. ChaCha is counter based, so a
//! sub-stream is fully determined by its key and stream id; sub-streams are
//! keyed by mixing the parent seed with a path of integer tags
//! (e.g. `[trial, module]`), which keeps every trial reproducible no matter
//! how many other trials run or in which order.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::keyed(seed, seed)
    }

    fn keyed(seed: u64, key_material: u64) -> Self {
        let mut state = key_material;
        let mut key = [0u8; 32];
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        Self {
            seed,
            inner: ChaCha8Rng::from_seed(key),
        }
    }

    /// The seed this stream (or its root) was created from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent sub-stream addressed by `tags`. Depends only on the root
    /// seed and the tag path, never on how much of `self` was consumed.
    pub fn substream(&self, tags: &[u64]) -> Rng {
        let mut state = self.seed ^ 0xD1B5_4A32_D192_ED03;
        let mut key = splitmix64(&mut state);
        for &tag in tags {
            state ^= tag.wrapping_mul(0xA24B_AED4_963E_E407);
            key = splitmix64(&mut state) ^ key.rotate_left(17);
        }
        let mut out = Self::keyed(self.seed, key);
        out.seed = key;
        out
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform draw in the open interval `(0, 1)`.
    pub fn uniform_open(&mut self) -> f64 {
        loop {
            let u = self.uniform();
            if u > 0.0 {
                return u;
            }
        }
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn gaussian(&mut self, mean: f64, sd: f64) -> f64 {
        mean + sd * self.normal()
    }

    /// Uniform index in `0..n`. Panics if `n == 0`.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Fair coin.
    pub fn coin(&mut self) -> bool {
        self.inner.random::<bool>()
    }

    /// Exponential draw with the given mean.
    pub fn exponential(&mut self, mean: f64) -> f64 {
        Exp::new(1.0 / mean)
            .expect("exponential mean must be positive")
            .sample(&mut self.inner)
    }
}

impl RngCore for Rng {
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
