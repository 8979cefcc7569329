//! Stable seed derivation: one base seed fans out to independent streams
//! named by label, so any stage can be rerun on its own.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn derive(base: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

pub fn rng(base: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, label))
}

/// Stream for item `index` of a labelled collection.
pub fn item_rng(base: u64, label: &str, index: usize) -> ChaCha8Rng {
    rng(base, &format!("{label}/{index}"))
}

/// Hex SHA-256 of a value's JSON serialization, for tagging run reports.
pub fn config_hash<T: serde::Serialize>(value: &T) -> crate::Result<String> {
    Ok(content_hash(&serde_json::to_vec(value)?))
}

/// Hex SHA-256 of raw bytes, for artifact hashes.
pub fn content_hash(bytes: &[u8]) -> String {
    crate::numerics::hex(&Sha256::digest(bytes))
}
