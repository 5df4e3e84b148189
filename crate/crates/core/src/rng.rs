//! Counter-based seed derivation.
//!
//! Every random stream in the crate is keyed by a master seed plus a path of
//! counters (layer, head, task index, ...). Streams never share state, so
//! per-layer work gives the same result in any execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(master), |acc, &c| splitmix64(acc ^ splitmix64(c)))
}

pub fn stream(master: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(master, path))
}

// Stream tags keep unrelated consumers of the same master seed apart.
pub(crate) const TAG_INIT: u64 = 1;
pub(crate) const TAG_TASK_MEANS: u64 = 2;
pub(crate) const TAG_TASK_SAMPLES: u64 = 3;
pub(crate) const TAG_SHUFFLE: u64 = 4;
pub(crate) const TAG_SCALING: u64 = 5;
pub(crate) const TAG_DROPOUT: u64 = 6;
pub(crate) const TAG_DARE: u64 = 7;
pub(crate) const TAG_LOWRANK: u64 = 8;
