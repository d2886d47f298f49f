//! Named random sub-streams derived from the single run seed.
//!
//! Each consumer draws from its own ChaCha stream so adding draws in one
//! place never shifts the numbers seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Scan = 3,
    Data = 4,
    Split = 5,
    Check = 6,
    Derive = 7,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// `n` independent seeds for consumers that need their own top-level seed,
/// such as separate synthetic train, validation and test sets.
pub fn derived_seeds(seed: u64, n: usize) -> Vec<u64> {
    use rand::Rng;
    let mut rng = stream_rng(seed, Stream::Derive);
    (0..n).map(|_| rng.random()).collect()
}
