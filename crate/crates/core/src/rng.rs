//! Deterministic, independently seeded random streams.
//!
//! Every consumer of randomness (one prompt slot in one round, the minibatch
//! shuffle of a round, one oracle instance) gets its own `ChaCha8Rng` whose
//! seed is a mix of the run seed and a tuple of labels. Streams never share
//! state, so collection order and parallelism cannot change results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// Stream labels, so different purposes never collide for identical indices.
pub mod tag {
    pub const ROLLOUT: u64 = 0x524f_4c4c;
    pub const SHUFFLE: u64 = 0x5348_5546;
    pub const TASK: u64 = 0x5441_534b;
    pub const ORACLE: u64 = 0x4f52_4143;
    pub const KL: u64 = 0x4b4c_4553;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds `labels` into `seed`.
pub fn derive_seed(seed: u64, labels: &[u64]) -> u64 {
    labels
        .iter()
        .fold(splitmix64(seed), |acc, &l| splitmix64(acc ^ splitmix64(l)))
}

pub fn stream(seed: u64, labels: &[u64]) -> Stream {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, labels))
}
