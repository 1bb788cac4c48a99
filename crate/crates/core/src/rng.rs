//! Deterministic random streams.
//!
//! Every draw is addressed by `(seed, stream)`: the seed keys a ChaCha8
//! generator and the stream selects an independent ChaCha counter space.
//! Per-example draws therefore depend only on the example index, never on
//! how many draws happened before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Roles used to derive sub-seeds inside an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Role {
    Data = 1,
    CalibrationNoise = 2,
    TestNoise = 3,
    Split = 4,
    Aps = 5,
    Model = 6,
}

/// Generator for stream `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Sub-seed for `(trial, role)` under an experiment seed.
pub fn derive_seed(seed: u64, trial: u64, role: Role) -> u64 {
    mix64(mix64(seed ^ mix64(trial)) ^ (role as u64).wrapping_mul(0xd6e8_feb8_6659_fd93))
}
