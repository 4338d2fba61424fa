//! Deterministic RNG stream derivation.
//!
//! Every random decision in a run draws from a ChaCha stream keyed by the
//! master seed plus a small tuple of coordinates (purpose, round, client).
//! Scheduling order therefore never influences the numbers drawn.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags keep streams for different subsystems disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Data = 1,
    Partition = 2,
    Init = 3,
    Sampling = 4,
    LocalTrain = 5,
    Experiment = 6,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Returns an independent stream for `(seed, purpose, a, b)`.
pub fn stream(seed: u64, purpose: Purpose, a: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(purpose as u64)));
    rng.set_stream(splitmix64(a.wrapping_mul(0x1_0000_0001).wrapping_add(splitmix64(b))));
    rng
}
