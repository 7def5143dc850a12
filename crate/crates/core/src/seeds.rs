//! Deterministic derivation of independent random streams.
//!
//! Every random stream in a run is keyed by the master seed plus a purpose
//! tag and an index path (generation, worker, task number, ...). Streams never
//! depend on scheduling or on how many draws another stream consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Purpose tags. Distinct tags give unrelated streams for the same indices.
pub mod tag {
    pub const POOL: u64 = 0x504f_4f4c;
    pub const META_TRAIN_DATA: u64 = 0x4d54_5244;
    pub const META_TEST_DATA: u64 = 0x4d54_5344;
    pub const TRAIN_TASK: u64 = 0x5452_544b;
    pub const TEST_TASK: u64 = 0x5453_544b;
    pub const INNER: u64 = 0x494e_4e52;
    pub const CLASSIFIER_INIT: u64 = 0x434c_494e;
    pub const BATCH_ORDER: u64 = 0x4241_5443;
    pub const POPULATION_INIT: u64 = 0x504f_5049;
    pub const BREED: u64 = 0x4252_4544;
    pub const MUTATE: u64 = 0x4d55_5441;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hashes a seed and a path of indices into a new 64-bit seed.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_for(seed: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, path))
}
