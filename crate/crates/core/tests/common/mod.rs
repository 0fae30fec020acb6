#![allow(dead_code)]

pub mod phase;

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rhvae::autodiff::{AdError, Tensor};
use rhvae::data::Dataset;
use rhvae::metric::{freeze_metric, MetricField};
use rhvae::nn::{init_params, ModelKind, ModelSpec};
use rhvae::train::{ModelBundle, TrainConfig};

pub fn lift<T>(r: rhvae::Result<T>) -> Result<T, AdError> {
    r.map_err(|e| AdError::InvalidArgument {
        op: "objective",
        msg: e.to_string(),
    })
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

/// Field with `n` centroids in `[-1, 1]^d` and random lower-triangular
/// factors.
pub fn random_field(d: usize, n: usize, seed: u64, temperature: f64, lambda: f64) -> MetricField {
    let mut r = rng(seed);
    let c = uniform(&mut r, n * d, -1.0, 1.0);
    let mut l = vec![0.0; n * d * d];
    for k in 0..n {
        for i in 0..d {
            for j in 0..=i {
                l[k * d * d + i * d + j] = if i == j {
                    r.random_range(0.5..1.5)
                } else {
                    r.random_range(-0.5..0.5)
                };
            }
        }
    }
    MetricField::from_cholesky(
        Tensor::new([n, d], c).unwrap(),
        &Tensor::new([n, d, d], l).unwrap(),
        temperature,
        lambda,
    )
    .unwrap()
}

/// Binary dataset of `n` random `side × side` images with `classes` labels.
pub fn random_binary(n: usize, side: usize, classes: usize, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let images = (0..n * side * side)
        .map(|_| if r.random_bool(0.4) { 1.0 } else { 0.0 })
        .collect();
    let labels = (0..n).map(|i| i % classes).collect();
    Dataset::new(images, labels, side, side).unwrap()
}

pub fn small_spec(kind: ModelKind, data_dim: usize) -> ModelSpec {
    let mut spec = ModelSpec {
        kind,
        data_dim,
        hidden: 8,
        ..ModelSpec::default()
    };
    spec.metric.hidden = 6;
    spec
}

/// An untrained bundle, with its metric frozen on `data` for RHVAE.
pub fn untrained_bundle(spec: ModelSpec, data: &Dataset, seed: u64) -> ModelBundle {
    let params = init_params(&spec, seed).unwrap();
    let field = (spec.kind == ModelKind::Rhvae).then(|| freeze_metric(&params, &spec, &data.all(), None).unwrap());
    ModelBundle {
        config: TrainConfig {
            model: spec,
            seed,
            ..TrainConfig::default()
        },
        params,
        field,
        history: Vec::new(),
        initial_val_obj: f64::NAN,
        best_epoch: 0,
        height: data.height,
        width: data.width,
    }
}
