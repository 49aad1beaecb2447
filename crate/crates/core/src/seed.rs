//! Counter-based seed derivation.
//!
//! Every random stream in the pipeline (weight init, shuffling, dropout,
//! synthetic clips) is keyed on the run seed plus a purpose tag and a few
//! counters, so streams never depend on how many draws another stream made.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TAG_INIT: u64 = 0x1;
pub const TAG_SHUFFLE: u64 = 0x2;
pub const TAG_DROPOUT: u64 = 0x3;
pub const TAG_EXTRACTOR: u64 = 0x4;
pub const TAG_SYNTH: u64 = 0x5;
pub const TAG_SPLIT: u64 = 0x6;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `base` with an ordered list of counters into a new 64-bit seed.
pub fn derive(base: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(base: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, parts))
}
