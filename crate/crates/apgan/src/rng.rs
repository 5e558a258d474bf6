//! Deterministic seeding and sampling.
//!
//! Every stochastic draw in the crate comes from a ChaCha8 stream derived
//! from (root seed, purpose tags), so whole runs replay bit-for-bit from a
//! single config seed. Gaussian draws always sample in f64 and convert, so
//! f32 and f64 models consume identical stream positions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::real::Real;

/// splitmix64 finalizer; decorrelates derived seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a root seed and a list of purpose tags.
pub fn derive_seed(root: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(mix(root), |acc, &t| mix(acc ^ mix(t)))
}

pub fn rng_for(root: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, tags))
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard normal via Box-Muller (cosine branch).
pub fn normal_f64(rng: &mut ChaCha8Rng) -> f64 {
    let mut u1: f64 = rng.gen();
    while u1 <= 0.0 {
        u1 = rng.gen();
    }
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn normal<T: Real>(rng: &mut ChaCha8Rng, std: f64) -> T {
    T::of(normal_f64(rng) * std)
}
