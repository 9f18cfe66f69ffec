//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! whose seed is a hash of the experiment seed and a path of labels, so
//! streams are independent of evaluation order and thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn mix_str(h: u64, s: &str) -> u64 {
    s.bytes()
        .fold(splitmix(h ^ 0x51), |acc, b| splitmix(acc ^ u64::from(b)))
}

/// Derive a child seed from `seed`, a label and an index.
pub fn derive(seed: u64, label: &str, index: u64) -> u64 {
    splitmix(mix_str(seed, label) ^ splitmix(index))
}

/// Shorthand for a stream seeded with [`derive`].
pub fn stream(seed: u64, label: &str, index: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(derive(seed, label, index))
}
