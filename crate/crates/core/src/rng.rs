//! Seeded random streams.
//!
//! Every stage draws from its own named stream derived from the run seed, so
//! changing how many numbers one stage consumes never shifts another stage.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::Real;

pub type StreamRng = ChaCha8Rng;

/// Derives the stream `name` from `seed`.
pub fn stream(seed: u64, name: &str) -> StreamRng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(key)
}

/// Normal(0, std) truncated to ±2 std by resampling.
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, std: Real) -> Real {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return (z * std as f64) as Real;
        }
    }
}
