//! Named random substreams.
//!
//! Every random draw in a run comes from a ChaCha8 generator whose 32-byte
//! seed is `SHA-256(master_le || len(purpose)_le || purpose || index_0_le || ...)`.
//! All integers are encoded as little-endian `u64`. The derivation depends only
//! on its arguments, so any scheduling of cells or clients reproduces the same
//! streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

fn digest(master: u64, purpose: &str, indices: &[u64]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update((purpose.len() as u64).to_le_bytes());
    hasher.update(purpose.as_bytes());
    for index in indices {
        hasher.update(index.to_le_bytes());
    }
    hasher.finalize().into()
}

/// A generator for the substream `(master, purpose, indices)`.
pub fn substream(master: u64, purpose: &str, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(digest(master, purpose, indices))
}

/// A 64-bit seed for the substream, for APIs that take a plain seed.
pub fn substream_seed(master: u64, purpose: &str, indices: &[u64]) -> u64 {
    let bytes = digest(master, purpose, indices);
    u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
}

/// Generator used by operations that take a bare `u64` seed.
pub fn from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
