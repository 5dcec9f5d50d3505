//! Reproducible random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 generator keyed by the
//! run seed, with the realization index selecting an independent stream via
//! [`ChaCha8Rng::set_stream`]. ChaCha is counter based, so stream `k` of seed
//! `s` is the same sequence no matter which thread or in which order the
//! realizations are produced.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream reserved for sampling initial states; realizations use `0..`.
pub const INITIAL_STATE_STREAM: u64 = u64::MAX;

pub fn stream(seed: u64, realization: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(realization);
    rng
}
