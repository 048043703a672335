//! Per-task seed derivation.
//!
//! Parallel evaluations never share an RNG: each task derives its own stream
//! from `(base seed, task coordinates)`, so results do not depend on the
//! number of workers or on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with task coordinates into an independent seed.
pub fn derive(base: u64, coords: &[u64]) -> u64 {
    coords
        .iter()
        .fold(splitmix64(base), |acc, &c| splitmix64(acc ^ splitmix64(c)))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream tags, so that different stages never collide on the same seed.
pub mod tag {
    pub const ENVIRONMENT: u64 = 1;
    pub const DISTURBANCE: u64 = 2;
    pub const INITIAL_STATE: u64 = 3;
    pub const POLICY_SAMPLE: u64 = 4;
    pub const ES_ITERATION: u64 = 5;
    pub const DEPLOY_CHOICE: u64 = 6;
    pub const MONTE_CARLO: u64 = 7;
    pub const PRIOR_INIT: u64 = 8;
}
