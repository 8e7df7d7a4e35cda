//! Deterministic seed derivation.
//!
//! Every random stream in the pipeline is keyed by `(master seed, tag,
//! index)` through a SHA-256 mix, so independent stages never share a
//! stream and every artifact is reproducible from the master seed alone.

use sha2::{Digest, Sha256};

/// Derives a child seed from a master seed, a purpose tag, and an index.
pub fn derive_seed(master: u64, tag: &str, index: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(tag.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Derives a child seed keyed by a string identity (e.g. a content hash).
pub fn derive_seed_str(master: u64, tag: &str, key: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(tag.as_bytes());
    hasher.update([0xff]);
    hasher.update(key.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}
