//! Deterministic RNG streams keyed by `(seed, tag, index)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Independent stream for one purpose; the same key always yields the same
/// sequence regardless of what other streams were drawn.
pub fn stream(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let words = [seed, fnv1a(tag), index, 0x5EED];
    let mut acc = 0u64;
    for (chunk, w) in key.chunks_mut(8).zip(words) {
        acc = splitmix(acc ^ w);
        chunk.copy_from_slice(&acc.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Stable 64-bit hash of a string (FNV-1a), used for config fingerprints.
pub fn hash_str(s: &str) -> u64 {
    fnv1a(s)
}
