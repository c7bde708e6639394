//! Seeded uniform streams.
//!
//! Drafting and verification each own one [`RandomStream`]. The sequence of
//! uniforms depends only on the seed and the order of draws, so outputs are
//! identical no matter how the two workers interleave.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Anything that can hand out uniforms on `[0, 1)`.
///
/// Verification is written against this trait so tests can script the
/// acceptance randomness and enumerate outcomes exactly.
pub trait UniformSource {
    fn next_uniform(&mut self) -> f64;
}

/// A reproducible stream of uniforms on `[0, 1)`.
#[derive(Debug, Clone)]
pub struct RandomStream {
    seed: u64,
    counter: u64,
    rng: ChaCha8Rng,
}

impl RandomStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            counter: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of uniforms drawn so far.
    pub fn counter(&self) -> u64 {
        self.counter
    }
}

impl UniformSource for RandomStream {
    fn next_uniform(&mut self) -> f64 {
        self.counter += 1;
        // `random::<f64>()` is defined on the half-open unit interval.
        self.rng.random::<f64>()
    }
}

/// Derives the seed of the `index`-th member of a family of runs.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = base ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
