//! Seed derivation for independent, reproducible random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a path of integers into a single 64-bit seed.
pub fn derive(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

pub fn rng_from(base: u64, path: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive(base, path))
}

/// Stream tags, so that e.g. the candidate draw of round 3 never shares a
/// stream with the fluctuation draw of round 3.
pub mod stream {
    pub const CANDIDATES: u64 = 1;
    pub const FLUCTUATION: u64 = 2;
    pub const LOCAL_UPDATE: u64 = 3;
    pub const SERVER_UPDATE: u64 = 4;
    pub const PLACEMENT: u64 = 5;
    pub const PERMISSIONS: u64 = 6;
    pub const INIT: u64 = 7;
    pub const TRIAL: u64 = 8;
}
