//! Seed derivation. Every random stream in the crate is keyed by
//! `(seed, tag)` rather than by call order, so results do not depend on the
//! order in which independent pieces of work are executed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::numerics::Tensor;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn stream(seed: u64, tag: u64) -> Rng {
    seeded(derive_seed(seed, tag))
}

pub fn standard_normal(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("finite normals")
}

/// Stream tags used across modules.
pub mod tags {
    pub const SCENE: u64 = 1;
    pub const BANK: u64 = 2;
    pub const TEXTURE: u64 = 3;
    pub const INIT: u64 = 4;
    pub const PRETRAIN: u64 = 5;
    pub const POSTTRAIN: u64 = 6;
    pub const EVAL: u64 = 7;
    pub const INITIAL_NOISE: u64 = 8;
    pub const PAIR: u64 = 9;
    pub const TIMESTEPS: u64 = 10;
}
