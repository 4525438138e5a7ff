//! Seeded random streams.
//!
//! Every consumer draws from its own ChaCha8 stream derived from
//! `(seed, purpose)`, so adding draws in one place never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose of a random stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Template = 2,
    Motif = 3,
    Placement = 4,
    Noise = 5,
    Shuffle = 6,
    Sampling = 7,
}

pub fn stream(seed: u64, purpose: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose as u64);
    rng
}

/// Seed for item `index` of a family derived from `seed`.
pub fn mix(seed: u64, index: u64) -> u64 {
    seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Stream for a sub-purpose, e.g. the noise of one particular image.
pub fn substream(seed: u64, purpose: Stream, index: u64) -> ChaCha8Rng {
    stream(mix(seed, index), purpose)
}
