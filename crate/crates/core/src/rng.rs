//! Seeded randomness.
//!
//! Every random draw in the crate comes from [`Xoshiro256PlusPlus`], seeded through
//! `SeedableRng::seed_from_u64` (SplitMix64 state expansion). Independent streams for
//! sub-problems are derived from the job seed with [`derive_seed`], so results do not
//! depend on the order in which sub-problems run.

use rand::SeedableRng;
pub use rand_xoshiro::Xoshiro256PlusPlus;

pub fn seeded(seed: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a base seed with a path of stream identifiers into a new seed.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}
