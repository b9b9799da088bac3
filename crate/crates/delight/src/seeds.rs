//! Seed derivation for independent random streams.
//!
//! Every stochastic component (scene jitter, illumination draws, sampler
//! state, weight init, reparameterization noise) gets its own generator
//! seeded through this function, so streams never alias and a single master
//! seed reproduces an entire pipeline bit for bit.

use sha2::{Digest, Sha256};

/// Derives a child seed from a master seed, a purpose tag and an index.
///
/// Collision-resistant across `(tag, index)` pairs by construction.
pub fn derive_seed(master: u64, tag: &str, index: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update([0xff]);
    hasher.update(tag.as_bytes());
    hasher.update([0xfe]);
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}
