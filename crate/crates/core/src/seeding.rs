//! Deterministic derivation of independent generator streams.
//!
//! Every random draw in training and evaluation comes from a generator keyed
//! by `(master seed, labels...)`, so skipping or adding one stage of work never
//! shifts the randomness seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a master seed with a sequence of labels into one 64-bit seed.
pub fn derive_seed(seed: u64, labels: &[u64]) -> u64 {
    labels
        .iter()
        .fold(splitmix(seed), |acc, &l| splitmix(acc ^ splitmix(l)))
}

pub fn stream(seed: u64, labels: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, labels))
}
