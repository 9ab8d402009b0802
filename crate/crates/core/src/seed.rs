//! Seed derivation.
//!
//! A run has one master seed. Every independent random stream (a trial, a
//! trajectory, a label) gets its own seed
//! `derive_seed(master, stream, index)`, where `stream` names the
//! sub-experiment and `index` counts items within it. Results therefore do
//! not depend on how work is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Stream identifiers used by the library. Callers may use any other value.
pub mod stream {
    pub const INSTANCE_TRUE: u64 = 1;
    pub const INSTANCE_BASE: u64 = 2;
    pub const CALIBRATION: u64 = 3;
    pub const URN: u64 = 4;
    pub const DERAIL: u64 = 5;
    pub const ENTROPY_MC: u64 = 6;
    pub const CORPUS: u64 = 7;
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ stream) ^ index)
}

pub fn rng_from_seed(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(master: u64, stream: u64, index: u64) -> SimRng {
    rng_from_seed(derive_seed(master, stream, index))
}
