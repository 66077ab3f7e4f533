//! Seeded, platform-independent pseudo-randomness.
//!
//! All randomness in the crate flows through [`SeededRng`], a thin wrapper
//! around the ChaCha8 stream cipher RNG. ChaCha8 is specified in terms of pure
//! 32-bit integer operations, so a given seed yields the same draw sequence on
//! every platform. Floating-point draws are derived from the raw 64-bit stream
//! with an explicit 53-bit mantissa conversion rather than going through
//! distribution code that could change between library versions.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Deterministic random stream. Identical seeds produce bit-identical
/// sequences across runs and platforms. No OS entropy is ever consulted.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    stream: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            seed,
            stream: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// The seed this stream was constructed from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derive an independent sub-stream for a named component. The label is
    /// mixed into the seed with the SplitMix64 finalizer so sub-streams do not
    /// overlap for nearby labels.
    pub fn derive(&self, label: u64) -> SeededRng {
        SeededRng::new(splitmix64(self.seed ^ label.wrapping_mul(0x9E37_79B9_7F4A_7C15)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.stream.next_u64()
    }

    /// Uniform draw in [0, 1) using the top 53 bits of the stream.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n). n must be nonzero. The modulo bias is below
    /// n / 2^64, irrelevant for the batch sizes this crate shuffles.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// SplitMix64 finalizer (Steele, Lea & Flood 2014). Used only for seed mixing.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}
