//! Seeded, splittable randomness. Every stochastic operation in the crate
//! draws from an explicit [`RngStream`]; there is no ambient global RNG.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Mixes a base seed with a tag into a new seed (splitmix64 finalizer).
/// Used to derive independent per-step / per-purpose streams from one
/// run seed, so resume-from-checkpoint replays the exact same draws.
pub fn mix_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A deterministic stream of random values backed by ChaCha8.
#[derive(Clone, Debug)]
pub struct RngStream {
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn seed_from(seed: u64) -> Self {
        RngStream { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Derives a child stream; children with distinct tags are independent.
    pub fn split(&self, tag: u64) -> Self {
        RngStream::seed_from(mix_seed(self.rng.get_seed()[0] as u64 ^ self.rng.get_word_pos() as u64, tag))
    }

    /// Fresh seed for a stochastic op (dropout sites consume one each).
    pub fn next_seed(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform f64 in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform f64 in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform usize in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Modulo bias is < 2^-40 for desk-scale n; acceptable and portable.
        (self.rng.next_u64() % n as u64) as usize
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}
