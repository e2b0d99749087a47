//! Counter-style RNG stream derivation.
//!
//! Every random consumer gets its own ChaCha8 stream keyed by a seed and a
//! stream index, so results never depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer; used to fold labels into seeds.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and an arbitrary label.
pub fn derive(seed: u64, label: u64) -> u64 {
    mix(seed ^ mix(label.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

/// Independent stream `index` under `seed`.
pub fn stream(seed: u64, index: u64) -> Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(index);
    r
}

/// Labels for the independent consumers inside one replication.
pub mod label {
    pub const POPULATION: u64 = 1;
    pub const SAMPLE_R: u64 = 2;
    pub const SAMPLE_B: u64 = 3;
    pub const BOOTSTRAP: u64 = 4;
    pub const MCMC_Z: u64 = 5;
    pub const MCMC_Y: u64 = 6;
    pub const MCMC_PIR: u64 = 7;
    pub const SUBSAMPLE: u64 = 8;
}
