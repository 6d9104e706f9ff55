//! Named sub-seeds derived from one experiment seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives a child seed from `parent` and a stream name. Stable across
/// platforms. Results fit in 63 bits so they survive signed config formats.
pub fn derive(parent: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(parent.to_le_bytes());
    h.update(name.as_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("sha256 has 32 bytes")) >> 1
}

/// Derives a child seed from `parent`, a stream name and an index (e.g. a step).
pub fn derive_indexed(parent: u64, name: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(parent.to_le_bytes());
    h.update(name.as_bytes());
    h.update(index.to_le_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("sha256 has 32 bytes")) >> 1
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Hex SHA-256 of a byte slice.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_distinct_and_stable() {
        assert_eq!(derive(7, "zoo"), derive(7, "zoo"));
        assert_ne!(derive(7, "zoo"), derive(7, "corpus"));
        assert_ne!(derive_indexed(7, "pair", 0), derive_indexed(7, "pair", 1));
    }
}
