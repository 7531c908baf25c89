//! Keyed random streams.
//!
//! Every random decision in a run draws from a stream keyed on
//! `(master_seed, round, client_id)`. The key is folded with SplitMix64:
//!
//! ```text
//! h = mix(master_seed ^ 0x9E3779B97F4A7C15)
//! h = mix(h ^ round)
//! h = mix(h ^ client_id)
//! seed[8i..8i+8] = le_bytes(mix(h + i * 0x9E3779B97F4A7C15))   for i in 0..4
//! ```
//!
//! and the 32-byte seed initializes a ChaCha8 generator (`rand_chacha`).
//! Reserved round keys tag streams that do not belong to a training round.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The PRNG family behind every stream.
pub type Stream = ChaCha8Rng;

/// Name recorded in configs so a run declares the family it was made with.
pub const PRNG_FAMILY: &str = "chacha8";

/// Round key for streams that are not tied to a training round.
pub const SETUP_ROUND: u64 = u64::MAX;
/// Client key for the server's per-round participant sampling.
pub const SERVER_CLIENT: u64 = u64::MAX;

/// Client keys used under [`SETUP_ROUND`].
pub mod setup {
    pub const DATA: u64 = 0;
    pub const PARTITION: u64 = 1;
    pub const MODEL_INIT: u64 = 2;
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream_key(master_seed: u64, round: u64, client_id: u64) -> u64 {
    let h = mix64(master_seed ^ GOLDEN);
    let h = mix64(h ^ round);
    mix64(h ^ client_id)
}

pub fn derive_rng(master_seed: u64, round: u64, client_id: u64) -> Stream {
    let key = stream_key(master_seed, round, client_id);
    let mut seed = [0u8; 32];
    for (i, chunk) in seed.chunks_exact_mut(8).enumerate() {
        let word = mix64(key.wrapping_add((i as u64).wrapping_mul(GOLDEN)));
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}
