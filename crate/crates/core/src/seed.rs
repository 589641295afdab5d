//! Seed derivation for reproducible random streams.
//!
//! Every random stream in the pipeline is keyed by the global seed plus a
//! short label and stream-specific parts (city id, epoch, ...), hashed with
//! SHA-256. Streams are therefore independent of call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Hashes `(seed, label, parts)` into a 32-byte ChaCha seed.
pub fn derive(seed: u64, label: &str, parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let out = h.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&out);
    bytes
}

pub fn rng(seed: u64, label: &str, parts: &[&[u8]]) -> Rng {
    ChaCha8Rng::from_seed(derive(seed, label, parts))
}

/// A 64-bit sub-seed, for APIs that take a plain integer seed.
pub fn subseed(seed: u64, label: &str, parts: &[&[u8]]) -> u64 {
    let b = derive(seed, label, parts);
    u64::from_le_bytes(b[..8].try_into().unwrap())
}
