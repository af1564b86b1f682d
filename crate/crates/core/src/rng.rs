//! Deterministic random streams.
//!
//! Every randomized stage draws from a ChaCha stream derived from the run
//! seed and a stage tag, so stages can be reordered or parallelized without
//! perturbing each other's draws.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Stream = ChaCha8Rng;

/// Derive an independent stream from `(seed, tag, index)`.
pub fn stream(seed: u64, tag: &str, index: u64) -> Stream {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(tag.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest[..32]);
    Stream::from_seed(key)
}

/// Standard normal draw via Box-Muller, deterministic given the stream state.
pub fn normal(rng: &mut Stream) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
