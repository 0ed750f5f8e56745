//! Content hashes used to key caches and stamp result files.

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Hex SHA-256 of arbitrary bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hex SHA-256 of the canonical JSON encoding of `value`.
pub fn hash_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config types serialize infallibly");
    sha256_hex(&bytes)
}

/// First 8 bytes of [`hash_json`] as a little-endian integer, for binary headers.
pub fn hash_u64<T: Serialize>(value: &T) -> u64 {
    let bytes = serde_json::to_vec(value).expect("config types serialize infallibly");
    let digest = Sha256::digest(&bytes);
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(head)
}

/// Folds several hashes into one.
pub fn combine(parts: &[&str]) -> String {
    sha256_hex(parts.join("|").as_bytes())
}
