//! Seed derivation. Every random draw in the crate comes from a ChaCha
//! stream keyed by `(seed, stream tag)`, so components never share state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream))
}

pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream))
}

/// Stream tags.
pub mod tags {
    pub const PROTOTYPES: u64 = 1;
    pub const SAMPLES: u64 = 2;
    pub const SPLIT_KEYS: u64 = 3;
    pub const QUERIES: u64 = 4;
    pub const GALLERY: u64 = 5;
    pub const INIT_ENCODER: u64 = 10;
    pub const INIT_HEAD: u64 = 11;
    pub const INIT_PSI: u64 = 12;
    pub const SHUFFLE: u64 = 20;
    pub const BACKFILL: u64 = 30;
    pub const VERIFY: u64 = 40;
}
