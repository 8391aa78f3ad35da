//! Seeded randomness. Every stochastic step in the crate draws from a
//! ChaCha8 stream so runs are reproducible across platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream for a named sub-component.
pub fn derive(seed: u64, stream: &str) -> Rng {
    let mut h = crate::numerics::Fnv64::default();
    h.write_u64(seed);
    h.write_bytes(stream.as_bytes());
    ChaCha8Rng::seed_from_u64(h.finish())
}

pub fn normal_vec(rng: &mut Rng, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("std is positive and finite");
    (0..n).map(|_| dist.sample(rng)).collect()
}
