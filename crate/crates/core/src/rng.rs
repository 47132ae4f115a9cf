//! Deterministic seed derivation. Every random stream in the project is a
//! `ChaCha8Rng` seeded from a (base seed, tag, index) triple so that results
//! are reproducible regardless of thread scheduling.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; good avalanche for cheap seed mixing.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over a string tag.
pub fn hash_tag(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive a child seed from (base, tag, index).
pub fn subseed(base: u64, tag: &str, index: u64) -> u64 {
    mix(base ^ hash_tag(tag) ^ mix(index))
}

/// A fresh deterministic RNG stream for (base, tag, index).
pub fn stream(base: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(subseed(base, tag, index))
}

/// Hash (seed, cell index) to a color component in [0, 1].
pub fn unit_from(seed: u64, a: u64, b: u64) -> f32 {
    let h = mix(seed ^ mix(a) ^ mix(b.wrapping_mul(0x9e37_79b9_7f4a_7c15)));
    // use the top 24 bits for an evenly spaced value in [0, 1]
    ((h >> 40) as f32) / ((1u64 << 24) as f32)
}
