//! Seed derivation so every pair, defect and restart gets an independent,
//! reproducible stream from a single run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Child seed for `(parent, tag, index)`. Tags separate independent uses.
pub fn derive_seed(parent: u64, tag: &str, index: u64) -> u64 {
    let mut h = mix(parent);
    for b in tag.bytes() {
        h = mix(h ^ b as u64);
    }
    mix(h ^ index.wrapping_mul(0x2545_f491_4f6c_dd1d))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
