//! Named RNG substreams derived from a single run seed.
//!
//! Every consumer (env, model init, batch sampling, FPS, ...) pulls its own
//! stream, so changing how one consumer draws cannot perturb the others.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a; stable across platforms and toolchain versions.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Deterministic substream for `(seed, name)`.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    let a = fnv1a(name.as_bytes());
    let b = fnv1a(&a.to_le_bytes());
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&a.to_le_bytes());
    key[16..24].copy_from_slice(&b.to_le_bytes());
    key[24..32].copy_from_slice(&(seed ^ a).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
