//! Seeded, splittable random streams.
//!
//! Every consumer of randomness takes a `(seed, stream)` pair so that
//! independent subsystems never share a generator. ChaCha is counter based,
//! so distinct stream ids give independent sequences for the same seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derive a child seed from a parent seed and a label (splitmix64 finalizer).
pub fn derive(seed: u64, label: u64) -> u64 {
    let mut z = seed ^ label.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// Stream ids used across the crate.
pub(crate) const STREAM_INIT: u64 = 1;
pub(crate) const STREAM_SHUFFLE: u64 = 2;
pub(crate) const STREAM_MINE_PERM: u64 = 4;
pub(crate) const STREAM_SELECT: u64 = 5;
pub(crate) const STREAM_FAULT: u64 = 6;
pub(crate) const STREAM_SYNTH: u64 = 7;
pub(crate) const STREAM_MONTE_CARLO: u64 = 8;
pub(crate) const STREAM_NONCE: u64 = 9;
