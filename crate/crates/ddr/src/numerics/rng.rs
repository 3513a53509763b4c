//! Seeded randomness.
//!
//! Everything random in the crate flows through a `ChaCha8Rng` so identical
//! seeds reproduce identical runs bit-for-bit on one machine. Subsystems
//! derive their own streams from (seed, label) so that, say, adding one more
//! masking draw never shifts the negative-sampling sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::numerics::{Scalar, Tensor};

pub type DdrRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> DdrRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream derived from a base seed and a purpose label.
pub fn derive(seed: u64, label: &str) -> DdrRng {
    seeded(seed ^ fnv1a(label.as_bytes()))
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Tensor with i.i.d. normal entries. Draws happen in f64 and are then cast,
/// so f32 and f64 instantiations of the same model start from the same draws.
pub fn normal_tensor<F: Scalar>(shape: &[usize], std: f64, rng: &mut DdrRng) -> Tensor<F> {
    let dist = Normal::new(0.0f64, std).expect("std must be finite and positive");
    let numel: usize = shape.iter().product();
    let data: Vec<F> = (0..numel)
        .map(|_| F::from_f64(dist.sample(rng)))
        .collect();
    let mut t = Tensor::zeros(shape);
    t.data_mut().copy_from_slice(&data);
    t
}
