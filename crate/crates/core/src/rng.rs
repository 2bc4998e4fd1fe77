//! Seed handling.
//!
//! Every random stream in the crate is a [`SplitMix64`] generator. Streams
//! that hang off a master seed are derived with [`derive_seed`], which mixes
//! the master seed with a purpose tag (and optionally an index), so adding a
//! new consumer never perturbs the draws of an existing one.

use rand::SeedableRng;
pub use rand_xoshiro::SplitMix64;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// The splitmix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    tag.bytes()
        .fold(FNV_OFFSET, |h, b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Stream seed for `(master, tag)`.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    mix64(mix64(master) ^ fnv1a(tag))
}

/// Stream seed for `(master, tag, index)`, e.g. one per episode or replicate.
pub fn derive_indexed(master: u64, tag: &str, index: u64) -> u64 {
    mix64(derive_seed(master, tag) ^ mix64(index))
}

pub fn rng_from(seed: u64) -> SplitMix64 {
    SplitMix64::seed_from_u64(seed)
}
