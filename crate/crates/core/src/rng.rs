//! Keyed random streams.
//!
//! Every stochastic quantity is drawn from a ChaCha stream whose key is built
//! from the master seed, a domain tag and two counters (e.g. node and step), so
//! draws do not depend on the order in which work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Initial particle clouds.
pub const DOMAIN_INIT: u64 = 1;
/// Langevin noise, keyed by (node, step).
pub const DOMAIN_NOISE: u64 = 2;
/// Random benchmark and test instances.
pub const DOMAIN_INSTANCE: u64 = 3;

pub fn substream(seed: u64, domain: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (chunk, word) in key.chunks_exact_mut(8).zip([seed, domain, a, b]) {
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
