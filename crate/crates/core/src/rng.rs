//! Seeded random streams.
//!
//! Every stochastic component draws from its own ChaCha stream identified by
//! `(seed, stream)`, so results never depend on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream ids reserved for the different consumers of a run seed.
pub mod streams {
    pub const SIMULATION: u64 = 1;
    pub const CHAIN_BASE: u64 = 1_000;
    pub const MONTE_CARLO: u64 = 2;
}

pub fn stream(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seed for replicate `index` of a batch started at `base_seed`.
pub fn replicate_seed(base_seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = base_seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
