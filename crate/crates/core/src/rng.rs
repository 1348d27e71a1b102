//! Counter-style seed derivation. Every random stream in the crate is a
//! ChaCha8 generator keyed by a seed derived from stable identifiers, so
//! results never depend on evaluation order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Order-sensitive combination of identifiers into one seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x6A09_E667_F3BC_C908, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// FNV-1a, used to turn names (stage names, tags) into seed material.
pub fn hash_str(s: &str) -> u64 {
    s.bytes().fold(0xCBF2_9CE4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

pub fn stream(parts: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivation_is_order_sensitive() {
        assert_ne!(derive_seed(&[1, 2]), derive_seed(&[2, 1]));
        assert_eq!(derive_seed(&[7, 3, 9]), derive_seed(&[7, 3, 9]));
        assert_ne!(hash_str("stage1"), hash_str("stage2"));
    }
}
