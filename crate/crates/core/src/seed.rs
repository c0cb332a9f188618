//! Seed splitting. Every random stream in the toolchain is derived from one
//! global seed and a string key, so results do not depend on processing
//! order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// First eight bytes (little endian) of SHA-256 over the length-prefixed parts.
pub fn stable_hash64(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub fn derive_seed(global: u64, key: &str) -> u64 {
    stable_hash64(&[&global.to_le_bytes(), key.as_bytes()])
}

pub fn rng_for(global: u64, key: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(global, key))
}

pub fn rng_from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Hex SHA-256 of arbitrary bytes, used for config and corpus hashes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_are_stable_and_distinct() {
        assert_eq!(derive_seed(7, "story-1"), derive_seed(7, "story-1"));
        assert_ne!(derive_seed(7, "story-1"), derive_seed(7, "story-2"));
        assert_ne!(derive_seed(7, "story-1"), derive_seed(8, "story-1"));
        // length prefixing keeps part boundaries unambiguous
        assert_ne!(stable_hash64(&[b"ab", b"c"]), stable_hash64(&[b"a", b"bc"]));
    }
}
