//! SHA-256 helpers shared by the replay matcher, fixture layout, env naming
//! and the registry.

use sha2::{Digest, Sha256};

/// Full lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(bytes.as_ref()))
}

/// First `len` hex characters of the SHA-256 of `bytes`.
pub fn short_hex(bytes: impl AsRef<[u8]>, len: usize) -> String {
    let mut full = sha256_hex(bytes);
    full.truncate(len);
    full
}

/// Lowercases and collapses every whitespace run to a single space.
pub fn normalize_text(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// 16-hex digest of normalized text. Used for prompt matching in replay
/// scripts and for the offline fixture file names.
pub fn text_digest(text: &str) -> String {
    short_hex(normalize_text(text), 16)
}
