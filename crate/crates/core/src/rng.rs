//! Seed derivation.
//!
//! Every random stream in the crate is a ChaCha8 generator whose 64-bit seed is
//! derived from the run's top-level seed and a list of integer keys, e.g.
//! `(seed, DOMAIN_SAMPLER, step, sequence_index)`. Keys are folded in with the
//! SplitMix64 finalizer, so a stream depends only on its key tuple and never on
//! how many numbers other streams consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const DOMAIN_INIT: u64 = 0x1;
pub const DOMAIN_ADAPTER: u64 = 0x2;
pub const DOMAIN_SPLIT: u64 = 0x3;
pub const DOMAIN_BATCH: u64 = 0x4;
pub const DOMAIN_SAMPLER: u64 = 0x5;
pub const DOMAIN_EVAL: u64 = 0x6;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds `keys` into `seed`.
pub fn derive_seed(seed: u64, keys: &[u64]) -> u64 {
    keys.iter()
        .fold(splitmix64(seed), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

pub fn stream(seed: u64, keys: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, keys))
}
