//! Seed derivation for independent, reproducible random streams.
//!
//! Every stochastic component draws from its own ChaCha stream whose seed is
//! a hash of the master seed and a list of integer tags (cycle, candidate
//! index, tree index, ...). Streams never depend on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// Stream tags keep unrelated consumers of the same (seed, cycle) apart.
pub mod tag {
    pub const TRUTH_OBS: u64 = 0x4f42_5345;
    pub const INIT_ENSEMBLE: u64 = 0x494e_4954;
    pub const PERTURB: u64 = 0x5045_5254;
    pub const RANK_TIES: u64 = 0x5241_4e4b;
    pub const FEATURE_TIES: u64 = 0x4645_4154;
    pub const CANDIDATES: u64 = 0x4341_4e44;
    pub const FOREST: u64 = 0x5452_4545;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hash a seed together with an ordered list of tags.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut h = splitmix64(seed);
    for &t in tags {
        h = splitmix64(h ^ splitmix64(t.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    h
}

pub fn stream(seed: u64, tags: &[u64]) -> Stream {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tags))
}
