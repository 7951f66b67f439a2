//! Seeded random number generation shared by every stochastic component.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Deterministic generator for `seed`, optionally split into an independent
/// stream so that one user seed can feed several consumers.
pub fn seeded(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) mod streams {
    pub const INIT: u64 = 1;
    pub const PHANTOM_NOISE: u64 = 2;
    pub const DRIFT_NOISE: u64 = 3;
    pub const SAMPLES: u64 = 4;
    pub const PHANTOM_SHAPE: u64 = 5;
    pub const SOURCE_NOISE: u64 = 6;
    pub const DENSITY: u64 = 7;
}
