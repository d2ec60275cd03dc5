//! Deterministic random streams keyed by (seed, tags).
//!
//! Every stochastic step draws from its own stream, e.g. `(seed, cycle,
//! particle)`, so results do not depend on evaluation order or threading.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let key = tags
        .iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)));
    ChaCha8Rng::seed_from_u64(key)
}

/// Stream tags distinguishing the independent uses of one seed.
pub mod tag {
    pub const INITIAL: u64 = 1;
    pub const TRUTH: u64 = 2;
    pub const OBSERVATION: u64 = 3;
    pub const FORECAST: u64 = 4;
    pub const RESAMPLE: u64 = 5;
}
