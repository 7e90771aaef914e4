//! Stable hashing and seeded sampling. Everything reproducible in the crate
//! derives its randomness from here.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

/// 64-bit digest of length-prefixed parts; stable across platforms and
/// releases.
pub fn stable_hash64(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `dim` i.i.d. standard normal components scaled by `1/√dim`, so the
/// expected squared norm is 1 whatever the width.
pub fn gaussian_direction(seed: u64, dim: usize) -> Vec<f32> {
    let mut rng = rng_from(seed);
    let scale = 1.0 / (dim as f64).sqrt();
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (z * scale) as f32
        })
        .collect()
}
