//! Seed derivation so every random stream is a pure function of its index.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(base) ^ stream) ^ index)
}

pub fn rng_for(base: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream, index))
}

// Stream tags.
pub(crate) const WORLD_BASES: u64 = 1;
pub(crate) const PLACES: u64 = 3;
pub(crate) const SPLIT: u64 = 4;
pub(crate) const VIEWS: u64 = 5;
pub(crate) const ENCODER_GROUND: u64 = 6;
pub(crate) const ENCODER_AERIAL: u64 = 7;
pub(crate) const PROTOTYPES: u64 = 8;
pub(crate) const SHUFFLE: u64 = 9;
pub(crate) const AUGMENT: u64 = 10;
pub(crate) const AERIAL_DB: u64 = 11;
pub(crate) const DENSITY: u64 = 12;
pub(crate) const GAPS: u64 = 13;
pub(crate) const QUERY: u64 = 14;
