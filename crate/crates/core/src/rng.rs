//! Named random substreams.
//!
//! Every stochastic decision draws from a ChaCha stream keyed by the global seed and a
//! short tuple of integers (purpose tag, step, query, level, ...). Results therefore do
//! not depend on thread scheduling or on how many draws other components made.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags for [`substream`]. Values are part of the reproducibility contract.
pub mod tag {
    pub const GENERATE: u64 = 1;
    pub const INIT_PARAMS: u64 = 2;
    pub const QUEUE_INIT: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const AUGMENT: u64 = 5;
    pub const INSTANCE_SELECT: u64 = 6;
    pub const PROTO_SELECT: u64 = 7;
    pub const CLUSTER: u64 = 8;
    pub const EVAL_CLUSTER: u64 = 9;
    pub const PROBE: u64 = 10;
    pub const DIAGNOSTICS: u64 = 11;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mixes a seed and a key path into a single 64-bit stream seed.
pub fn derive_seed(seed: u64, key: &[u64]) -> u64 {
    key.iter()
        .fold(splitmix64(seed), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

pub fn substream(seed: u64, key: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, key))
}
