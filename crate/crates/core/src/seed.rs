//! Keyed seed derivation.
//!
//! Every stochastic component draws from its own stream, derived from the
//! root seed and a component key, so adding draws in one component never
//! shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Derive a sub-seed from `root` and a textual key.
pub fn derive_seed(root: u64, key: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update((key.len() as u64).to_le_bytes());
    hasher.update(key.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Shorthand for `rng_from_seed(derive_seed(root, key))`.
pub fn keyed_rng(root: u64, key: &str) -> Rng {
    rng_from_seed(derive_seed(root, key))
}

/// Hex digest of arbitrary text, truncated to 16 characters.
pub fn short_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}
