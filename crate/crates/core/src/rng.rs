//! Seeded random streams.
//!
//! Every consumer of randomness draws from its own ChaCha8 stream derived
//! from `(seed, stream)`, so results do not depend on call order.

use autodiff::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

/// Stream tags, kept disjoint so that purposes never share a stream.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const SHAPES: u64 = 2;
    pub const SELECT: u64 = 3;
    pub const SPLIT: u64 = 4;
    pub const BATCH: u64 = 5;
    pub const TRAIN_NOISE: u64 = 6;
    pub const VAL_NOISE: u64 = 7;
    pub const IS_NOISE: u64 = 8;
    pub const ELBO_NOISE: u64 = 9;
    pub const MEDOIDS: u64 = 10;
    pub const GEODESIC: u64 = 11;
    pub const GENERATE: u64 = 12;
}

pub fn stream(seed: u64, tag: u64, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((tag << 48) ^ index);
    rng
}

pub fn normal_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn normal_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), normal_vec(rng, n)).expect("non-empty shape")
}
