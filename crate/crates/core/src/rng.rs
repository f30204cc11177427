//! Keyed random streams.
//!
//! Every stochastic step draws from a ChaCha stream whose seed is a hash of
//! the master seed and a small key path (graph, layer, step, ...). Results
//! therefore do not depend on how work is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a master seed with a key path into a new 64-bit seed.
pub fn derive_seed(master: u64, key: &[u64]) -> u64 {
    key.iter()
        .fold(splitmix64(master), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

pub fn keyed_rng(master: u64, key: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(master, key))
}
