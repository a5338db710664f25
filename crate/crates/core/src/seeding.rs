//! Deterministic RNG stream derivation.
//!
//! Every stream is keyed by a master seed plus a list of labels (chain
//! index, subject id, study cell, replicate) hashed with SHA-256, so streams
//! are independent of scheduling order and of subject position.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

pub fn derive_seed(master: u64, parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    for part in parts {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part);
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub fn stream(master: u64, parts: &[&[u8]]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, parts))
}
