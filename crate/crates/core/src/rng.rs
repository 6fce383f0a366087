//! Named random streams derived from a master seed.
//!
//! Each consumer (initialisation, shuffling, augmentation, masking, data
//! synthesis) draws from its own stream, keyed by name and a small index
//! path, so adding or removing one consumer never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn stream(seed: u64, name: &str, path: &[u64]) -> Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    for p in path {
        h.update(p.to_le_bytes());
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Normal sample rejected outside two standard deviations.
pub fn truncated_normal(rng: &mut Rng, std: f64) -> f64 {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let z: f64 = normal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}
