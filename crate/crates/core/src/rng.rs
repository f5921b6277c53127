//! Portable seeded randomness.
//!
//! Every random draw in the crate comes from a xoshiro256** generator whose
//! state is expanded from a 64-bit seed with SplitMix64. Independent
//! consumers (graph generation, initialization, shuffling, data synthesis)
//! take separate streams derived from the master seed and a domain tag so
//! that adding draws in one place never perturbs another.

use rand::SeedableRng;
pub use rand_xoshiro::Xoshiro256StarStar as Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Generator seeded directly from `seed`.
pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Generator for the sub-stream `(seed, domain, index)`.
pub fn stream(seed: u64, domain: Domain, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, domain, index))
}

/// Mixes a master seed with a domain tag and index into a new 64-bit seed.
pub fn derive_seed(seed: u64, domain: Domain, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(GOLDEN.wrapping_mul(domain as u64 + 1))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Consumers of randomness. Each gets its own stream family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Topology = 1,
    Init = 2,
    Shuffle = 3,
    Data = 4,
    Split = 5,
    GradCheck = 6,
}
