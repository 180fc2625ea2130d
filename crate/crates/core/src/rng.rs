//! Labelled, seed-derived random streams.
//!
//! Every random draw in the toolkit comes from a stream keyed by a master
//! seed and a fixed label, so disabling one noise component never shifts the
//! draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Derives a stream for `label` from `seed`.
pub fn stream(seed: u64, label: &str) -> StreamRng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Derives a child seed, for handing a seed to an operation that builds its
/// own streams.
pub fn child_seed(seed: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(b"/seed/");
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_label_same_stream() {
        let a: Vec<u64> = stream(7, "row").random_iter().take(8).collect();
        let b: Vec<u64> = stream(7, "row").random_iter().take(8).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn labels_and_seeds_separate() {
        let a: u64 = stream(7, "row").random();
        let b: u64 = stream(7, "col").random();
        let c: u64 = stream(8, "row").random();
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_ne!(child_seed(1, "x"), child_seed(1, "y"));
    }
}
