//! Content fingerprints used to tie artifacts (checkpoints, profiles,
//! probe sets, plans) together across pipeline stages.

use sha2::{Digest, Sha256};

/// Hex-encoded SHA-256 truncated to 16 chars; short enough for logs and
/// report headers, long enough to make accidental collisions irrelevant.
pub fn fingerprint_bytes(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(16);
    for b in &digest[..8] {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

pub fn fingerprint_f32s(values: impl Iterator<Item = f32>) -> String {
    let mut hasher = Sha256::new();
    for v in values {
        hasher.update(v.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut out = String::with_capacity(16);
    for b in &digest[..8] {
        out.push_str(&format!("{b:02x}"));
    }
    out
}
