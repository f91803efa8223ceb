//! Seeded random streams. Every consumer draws from a named sub-stream of
//! the run seed so that adding randomness in one place never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Derives an independent generator for `(seed, name)`.
pub fn stream(seed: u64, name: &str) -> Rng {
    stream_with(seed, name, &[])
}

/// Like [`stream`], with extra bytes mixed into the derivation.
pub fn stream_with(seed: u64, name: &str, extra: &[u8]) -> Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    h.update(extra);
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}
