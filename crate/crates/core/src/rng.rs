//! Seeded random streams.
//!
//! Every random decision in the pipeline draws from a [`ChaCha8Rng`] whose
//! seed is derived from a master seed and a stream path (for example
//! `["demos", instance_id, "2"]`). Streams for different purposes never share
//! state, so adding a draw in one stage cannot shift another stage.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Identifier recorded in manifests for the generator and derivation scheme.
pub const RNG_ID: &str = "chacha8-sha256-v1";

pub type StreamRng = ChaCha8Rng;

/// Derives a 32-byte seed from `master` and a stream path.
pub fn derive_seed(master: u64, path: &[&str]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(RNG_ID.as_bytes());
    hasher.update(master.to_le_bytes());
    for part in path {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part.as_bytes());
    }
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    seed
}

/// Opens the stream identified by `path` under `master`.
pub fn stream(master: u64, path: &[&str]) -> StreamRng {
    ChaCha8Rng::from_seed(derive_seed(master, path))
}

/// Derives a plain `u64` sub-seed, for APIs that take an integer seed.
pub fn sub_seed(master: u64, path: &[&str]) -> u64 {
    let seed = derive_seed(master, path);
    u64::from_le_bytes(seed[..8].try_into().expect("8 bytes"))
}
