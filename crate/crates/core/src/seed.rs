//! Deterministic seed derivation.
//!
//! Every random stream in the pipeline is a ChaCha8 generator seeded from a
//! 64-bit value derived by mixing a base seed with integer coordinates
//! (condition, shot, task index, repeat, ...). Derived seeds do not depend on
//! evaluation order, so runs can be split across workers freely.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub const fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `parts` into `base`, order-sensitive.
pub fn derive(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(mix64(base), |acc, &p| mix64(acc ^ mix64(p.wrapping_add(0x5851_F42D_4C95_7F2D))))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream tags so that e.g. "init" and "episodes" never share a seed.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const EPISODES: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const TASK: u64 = 4;
    pub const SOURCE_BATCH: u64 = 5;
    pub const DATA: u64 = 6;
}
