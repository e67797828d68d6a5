//! Deterministic random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 stream whose key is
//! derived from `(seed, domain, path)`. ChaCha is counter based, so a stream
//! depends only on its coordinates, never on what else was drawn before it
//! or on which thread asked for it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Opens the stream identified by `seed`, a domain tag, and an index path.
pub fn stream(seed: u64, domain: &str, path: &[u64]) -> StreamRng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((domain.len() as u64).to_le_bytes());
    hasher.update(domain.as_bytes());
    for p in path {
        hasher.update(p.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Fisher-Yates shuffle driven by `rng`. Uses a fixed draw sequence so the
/// result does not depend on `rand`'s internal shuffle implementation.
pub fn shuffle<T>(items: &mut [T], rng: &mut StreamRng) {
    use rand::Rng;
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}
