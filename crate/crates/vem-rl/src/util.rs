//! Small shared helpers: stable hashing, seed derivation, float byte layout.

use sha2::{Digest, Sha256};

/// Stable 64-bit digest of arbitrary bytes (first 8 bytes of SHA-256,
/// little-endian). Used for content addressing and tabular cell keys so that
/// keys are identical across runs and platforms.
pub fn stable_hash64(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Full SHA-256 digest rendered as lowercase hex.
pub fn content_hash_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Derives a stage- or stream-scoped seed from a global seed and a label.
/// The derivation is documented behavior: `sha256(seed_le || label)`.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut bytes = Vec::with_capacity(8 + label.len());
    bytes.extend_from_slice(&seed.to_le_bytes());
    bytes.extend_from_slice(label.as_bytes());
    stable_hash64(&bytes)
}

/// Packs an f64 slice into a little-endian byte block.
pub fn f64s_to_le_bytes(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Reads a little-endian f64 block produced by [`f64s_to_le_bytes`].
pub fn f64s_from_le_bytes(bytes: &[u8]) -> Option<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return None;
    }
    Some(
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    )
}
