//! Deterministic RNG stream derivation.
//!
//! Every random draw in the crate comes from a ChaCha stream derived from a
//! user-visible seed plus a role tag, so independent pipeline stages (weight
//! init, shuffling, augmentation, toy-data synthesis) never share or race on
//! one generator and results are reproducible across platforms.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 step; good avalanche, used only to mix seed material.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Derives an independent RNG stream from `seed` and a sequence of tag words.
///
/// Tags are mixed in order, so `derive_rng(s, &[a, b])` and
/// `derive_rng(s, &[b, a])` are unrelated streams. String roles are hashed
/// with [`tag`].
pub fn derive_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = splitmix64(seed ^ 0x53_59_4e_54_48_44_45_54); // "SYNTHDET"
    for &t in tags {
        state = splitmix64(state ^ splitmix64(t));
    }
    ChaCha8Rng::seed_from_u64(state)
}

/// Hashes a short role name ("shuffle", "augment", ...) into a tag word.
pub fn tag(role: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64; // FNV-1a
    for b in role.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let mut a1 = derive_rng(7, &[tag("shuffle"), 0]);
        let mut a2 = derive_rng(7, &[tag("shuffle"), 0]);
        let mut b = derive_rng(7, &[tag("shuffle"), 1]);
        let mut c = derive_rng(8, &[tag("shuffle"), 0]);
        let xs1: Vec<u64> = (0..16).map(|_| a1.gen()).collect();
        let xs2: Vec<u64> = (0..16).map(|_| a2.gen()).collect();
        let ys: Vec<u64> = (0..16).map(|_| b.gen()).collect();
        let zs: Vec<u64> = (0..16).map(|_| c.gen()).collect();
        assert_eq!(xs1, xs2);
        assert_ne!(xs1, ys);
        assert_ne!(xs1, zs);
    }

    #[test]
    fn tag_order_matters() {
        let mut ab = derive_rng(1, &[tag("a"), tag("b")]);
        let mut ba = derive_rng(1, &[tag("b"), tag("a")]);
        let x: u64 = ab.gen();
        let y: u64 = ba.gen();
        assert_ne!(x, y);
    }
}
