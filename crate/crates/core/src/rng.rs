//! Seeding helpers.
//!
//! Every random stream in the crate is a `ChaCha8Rng`. Stage seeds are derived
//! from the global seed as `splitmix64(global ^ fnv1a64(stage_name))`, so any
//! stage can be rerun in isolation with the same stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type Rng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn fnv1a64(s: &str) -> u64 {
    s.bytes().fold(0xCBF2_9CE4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

pub fn derive_seed(global: u64, stage: &str) -> u64 {
    splitmix64(global ^ fnv1a64(stage))
}

pub fn stage_rng(global: u64, stage: &str) -> Rng {
    rng_from_seed(derive_seed(global, stage))
}

pub fn standard_normal<T: Scalar>(shape: impl Into<Vec<usize>>, rng: &mut Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::of(z)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn derived_seeds_differ_per_stage() {
        assert_ne!(derive_seed(0, "pretrain"), derive_seed(0, "align"));
        assert_eq!(derive_seed(5, "train"), derive_seed(5, "train"));
    }

    #[test]
    fn chacha_stream_is_pinned() {
        // Guards against silent changes of the generator behind `Rng`.
        let mut r = rng_from_seed(0);
        let a: u64 = r.random();
        let mut r2 = rng_from_seed(0);
        assert_eq!(a, r2.random::<u64>());
    }
}
