//! Seed derivation for independent, reproducible random streams.
//!
//! Every stream (per epoch, per slide, per split) is keyed from the user seed
//! so parallel work never changes results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(seed: u64, stream: u64) -> u64 {
    mix(mix(seed) ^ stream.wrapping_mul(0xD605_BBB5_8C8A_BBFD))
}

/// FNV-1a, used to key streams by string identifiers.
pub fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn rng(seed: u64, stream: u64) -> Rng {
    Rng::seed_from_u64(derive(seed, stream))
}

/// Stream tags keep unrelated consumers of the same seed apart.
pub mod tag {
    pub const INIT: u64 = 0x1001;
    pub const EPOCH: u64 = 0x1002;
    pub const EMBED: u64 = 0x1003;
    pub const SPLIT: u64 = 0x1004;
    pub const SLIDE: u64 = 0x1005;
    pub const AUG: u64 = 0x1006;
    pub const PROTOTYPE: u64 = 0x1007;
}
