//! Deterministic seed derivation.
//!
//! A run has one root seed. Every stochastic component draws from its own
//! stream, keyed by a fixed label and an index, so the values it sees do not
//! depend on which other components ran first or on thread timing.

use std::hash::Hasher;

use fnv::FnvHasher;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Seed for the stream `(root, label, index)`.
pub fn derive_seed(root: u64, label: &str, index: u64) -> u64 {
    let mut h = FnvHasher::default();
    h.write(&root.to_le_bytes());
    h.write(label.as_bytes());
    h.write_u8(0xff);
    h.write(&index.to_le_bytes());
    mix64(h.finish())
}

/// Fresh generator for the stream `(root, label, index)`.
pub fn stream(root: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, label, index))
}

/// A uniform value in `[0, 1)` keyed by `(root, label, index)`, for places
/// where building a full generator per value would be wasteful.
pub fn unit_hash(root: u64, label: &str, index: u64) -> f64 {
    (derive_seed(root, label, index) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

// splitmix64 finalizer; FNV alone leaves low bits poorly mixed.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
