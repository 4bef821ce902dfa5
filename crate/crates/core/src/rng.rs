//! Seeded randomness. Every stochastic routine takes an explicit RNG; multi-run
//! jobs derive per-run seeds with [`derive_seed`] so results never depend on
//! execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type LabRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> LabRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes a base seed with a run or shard index (splitmix64 finalizer over
/// `base ^ (index * golden_gamma)`).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
