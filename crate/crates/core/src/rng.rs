//! Seeded random number generation.
//!
//! Every stochastic step in the crate (synthetic data, splits, weight init,
//! shuffling, dropout) draws from ChaCha8 seeded through `seed_from_u64`.
//! ChaCha output is specified bit-for-bit, so results do not depend on the
//! platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Generator for `seed`, independent streams selected by `stream`.
pub fn seeded(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// Stream ids, so that e.g. changing the split does not perturb weight init.
pub(crate) const STREAM_SYNTH: u64 = 1;
pub(crate) const STREAM_SPLIT: u64 = 2;
pub(crate) const STREAM_INIT: u64 = 3;
pub(crate) const STREAM_TRAIN: u64 = 4;
pub(crate) const STREAM_PERTURB: u64 = 5;
