//! Importance-sampling log-likelihood, reconstruction error and reports.

use std::fmt;
use std::path::Path;

use autodiff::{Tape, Tensor};
use rayon::prelude::*;

use crate::data::{write_pgm_grid, Dataset};
use crate::error::{Error, Result};
use crate::flow::{elbo_value, log_q_z, potential, Noise};
use crate::nn::Model;
use crate::rng::{self, normal_tensor, tag};
use crate::train::ModelBundle;

/// `log Σ exp(v)`, stable for large magnitudes.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Log importance weights `log p(x, z_s) − log q(z_s | x)` for one datum.
pub fn log_weights(params: &Model<Tensor>, x: &[f64], eps: &Tensor) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let m = params.bind_constants(&tape);
    let xv = tape.constant(Tensor::new([1, x.len()], x.to_vec())?);
    let (mean, log_var) = m.encoder.encode(&xv)?;
    let e = tape.constant(eps.clone());
    let z = mean.add(&log_var.scale(0.5).exp().mul(&e)?)?;
    let lq = log_q_z(&log_var.broadcast_to(&eps.shape().to_vec())?, &e)?;
    let lw = potential(&m.decoder, &xv, &z)?.neg().sub(&lq)?;
    let v = lw.value().data().to_vec();
    Ok(v)
}

/// Per-datum importance-sampling estimate `log (1/S) Σ_s w_s`.
pub fn is_log_likelihood_datum(params: &Model<Tensor>, x: &[f64], eps: &Tensor) -> Result<f64> {
    let lw = log_weights(params, x, eps)?;
    Ok(log_sum_exp(&lw) - (lw.len() as f64).ln())
}

#[derive(Clone, Debug, PartialEq)]
pub struct IsEstimate {
    /// Mean per-datum log-likelihood of each repeat.
    pub repeats: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation over repeats (0 for a single repeat).
    pub std: f64,
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Mean per-datum log-likelihood with `samples` proposals from `q_φ(z|x)`,
/// repeated `repeats` times with independent noise.
pub fn is_log_likelihood(
    params: &Model<Tensor>,
    latent_dim: usize,
    data: &Dataset,
    samples: usize,
    repeats: usize,
    seed: u64,
) -> Result<IsEstimate> {
    if samples == 0 || repeats == 0 || data.is_empty() {
        return Err(Error::Config("samples, repeats and data must be non-empty".into()));
    }
    let n = data.len();
    let mut per_repeat = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let vals: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut g = rng::stream(seed, tag::IS_NOISE, (r * n + i) as u64);
                let eps = normal_tensor(&mut g, &[samples, latent_dim]);
                is_log_likelihood_datum(params, data.image(i), &eps)
            })
            .collect::<Result<_>>()?;
        per_repeat.push(vals.iter().sum::<f64>() / n as f64);
    }
    let (mean, std) = mean_std(&per_repeat);
    Ok(IsEstimate {
        repeats: per_repeat,
        mean,
        std,
    })
}

/// `Σ‖x − x̂‖² / Σ‖x‖²`.
pub fn relative_error(x: &[f64], x_hat: &[f64]) -> Result<f64> {
    let den: f64 = x.iter().map(|v| v * v).sum();
    if den == 0.0 {
        return Err(Error::Data("relative error of an all-zero dataset".into()));
    }
    let num: f64 = x.iter().zip(x_hat).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(num / den)
}

/// Posterior-mean reconstructions `π_θ(μ_φ(x))`, `(N, D)`.
pub fn reconstruct(params: &Model<Tensor>, data: &Dataset) -> Result<Tensor> {
    params.decode_values(&params.encode_means(&data.all())?)
}

pub fn reconstruction_error(params: &Model<Tensor>, data: &Dataset) -> Result<f64> {
    let x_hat = reconstruct(params, data)?;
    relative_error(&data.images, x_hat.data())
}

/// Writes the first `per_class` samples of every class (top row) above their
/// reconstructions (bottom row). Returns the number of tiles.
pub fn reconstruct_grid(params: &Model<Tensor>, data: &Dataset, per_class: usize, path: &Path) -> Result<usize> {
    let mut idx = Vec::new();
    for c in 0..data.num_classes() {
        idx.extend(
            (0..data.len())
                .filter(|&i| data.labels[i] == c)
                .take(per_class),
        );
    }
    if idx.is_empty() {
        return Err(Error::Data("no samples to reconstruct".into()));
    }
    let sub = data.subset(&idx);
    let recon = reconstruct(params, &sub)?;
    let mut tiles = sub.images.clone();
    tiles.extend_from_slice(recon.data());
    write_pgm_grid(&tiles, data.height, data.width, idx.len(), path)?;
    Ok(2 * idx.len())
}

/// ELBO of a trained bundle on `data`, one noise draw per datum.
pub fn bundle_elbo(bundle: &ModelBundle, data: &Dataset, seed: u64) -> Result<f64> {
    let spec = bundle.spec();
    let mut g = rng::stream(seed, tag::ELBO_NOISE, 0);
    let noise = Noise::draw(&mut g, data.len(), spec.latent_dim);
    elbo_value(&bundle.params, spec, &data.all(), &noise, bundle.field_source())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub log_likelihood: IsEstimate,
    pub samples: usize,
    pub recon_train: f64,
    pub recon_test: f64,
    pub elbo_test: f64,
}

pub fn evaluate(
    bundle: &ModelBundle,
    train: &Dataset,
    test: &Dataset,
    samples: usize,
    repeats: usize,
    seed: u64,
) -> Result<EvalReport> {
    Ok(EvalReport {
        log_likelihood: is_log_likelihood(&bundle.params, bundle.spec().latent_dim, test, samples, repeats, seed)?,
        samples,
        recon_train: reconstruction_error(&bundle.params, train)?,
        recon_test: reconstruction_error(&bundle.params, test)?,
        elbo_test: bundle_elbo(bundle, test, seed)?,
    })
}

impl EvalReport {
    pub fn csv(&self) -> String {
        format!(
            "log_likelihood_per_datum_mean,log_likelihood_per_datum_std,samples,repeats,recon_train,recon_test,elbo_test\n{},{},{},{},{},{},{}\n",
            self.log_likelihood.mean,
            self.log_likelihood.std,
            self.samples,
            self.log_likelihood.repeats.len(),
            self.recon_train,
            self.recon_test,
            self.elbo_test
        )
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "log p(x) per datum (S={}, {} repeats): {:.2} ({:.2})",
            self.samples,
            self.log_likelihood.repeats.len(),
            self.log_likelihood.mean,
            self.log_likelihood.std
        )?;
        writeln!(f, "relative reconstruction error: train {:.4}, test {:.4}", self.recon_train, self.recon_test)?;
        write!(f, "test ELBO: {:.2}", self.elbo_test)
    }
}
