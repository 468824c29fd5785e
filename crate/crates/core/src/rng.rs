//! Seeded randomness.
//!
//! Every stochastic step in the crate draws from ChaCha8, a counter-based
//! stream cipher generator whose output is fixed by its 64-bit seed on every
//! platform. Sub-streams for independent trials are derived with
//! [`derive_seed`] (one SplitMix64 round over `seed + index * golden`).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
