//! The learned inverse metric
//! `G⁻¹(z) = Σ_i M_i exp(−‖z − c_i‖² / T²) + λ I`,
//! position-dependent momentum sampling and the pull-back baseline.

use autodiff::{linalg, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::cluster::{k_medoids, DistanceMatrix};
use crate::error::{Error, Result};
use crate::nn::{Model, ModelSpec};

pub const LOG_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    pub temperature: f64,
    pub learn_temperature: bool,
    pub lambda: f64,
    pub learn_lambda: bool,
    /// Hidden width of the metric network.
    pub hidden: usize,
    /// Keep only this many centroids (k-medoids) when freezing.
    pub reduce_to: Option<usize>,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            temperature: 0.8,
            learn_temperature: false,
            lambda: 1e-3,
            learn_lambda: false,
            hidden: 150,
            reduce_to: None,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.lambda > 0.0 && self.hidden > 0) {
            return Err(Error::Config("metric temperature, lambda and hidden must be positive".into()));
        }
        Ok(())
    }
}

/// A frozen metric: centroids `(N, d)`, PSD factors `M_i` `(N, d, d)`,
/// temperature and regularization.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricField {
    pub centroids: Tensor,
    pub factors: Tensor,
    pub temperature: f64,
    pub lambda: f64,
}

impl MetricField {
    pub fn new(centroids: Tensor, factors: Tensor, temperature: f64, lambda: f64) -> Result<Self> {
        let cs = centroids.shape();
        if cs.len() != 2 || factors.shape() != [cs[0], cs[1], cs[1]] {
            return Err(Error::Data(format!(
                "centroids {:?} and factors {:?} do not describe a field",
                cs,
                factors.shape()
            )));
        }
        if !(temperature > 0.0 && lambda > 0.0) {
            return Err(Error::Data("temperature and lambda must be positive".into()));
        }
        let d = cs[1];
        for (k, m) in factors.data().chunks(d * d).enumerate() {
            for i in 0..d {
                for j in 0..i {
                    let diff = (m[i * d + j] - m[j * d + i]).abs();
                    if diff > 1e-10 * (1.0 + m[i * d + j].abs()) {
                        return Err(Error::Data(format!("factor {k} is not symmetric")));
                    }
                }
            }
        }
        Ok(Self {
            centroids,
            factors,
            temperature,
            lambda,
        })
    }

    /// Builds `M_i = L_i L_iᵀ` from lower-triangular factors `(N, d, d)`.
    pub fn from_cholesky(centroids: Tensor, l: &Tensor, temperature: f64, lambda: f64) -> Result<Self> {
        let m = linalg::matmul(l, &linalg::transpose(l)?)?;
        Self::new(centroids, m, temperature, lambda)
    }

    /// The constant field `G⁻¹ = λ I`, represented by one centroid with a
    /// zero factor.
    pub fn flat(d: usize, lambda: f64) -> Self {
        Self {
            centroids: Tensor::zeros([1, d]).expect("d > 0"),
            factors: Tensor::zeros([1, d, d]).expect("d > 0"),
            temperature: 1.0,
            lambda,
        }
    }

    pub fn dim(&self) -> usize {
        self.centroids.shape()[1]
    }

    pub fn len(&self) -> usize {
        self.centroids.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bind(&self, tape: &Tape) -> FieldVars {
        let (n, d) = (self.len(), self.dim());
        FieldVars {
            centroids: tape.constant(self.centroids.clone()),
            factors: tape.constant(self.factors.reshape([n, d * d]).expect("same size")),
            inv_t2: tape.scalar(1.0 / (self.temperature * self.temperature)),
            lambda: tape.scalar(self.lambda),
        }
    }

    /// `G⁻¹(z)` as a row-major `d × d` array, without a tape.
    pub fn inverse_metric_at(&self, z: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let inv_t2 = 1.0 / (self.temperature * self.temperature);
        let mut g = vec![0.0; d * d];
        for (c, m) in self
            .centroids
            .data()
            .chunks(d)
            .zip(self.factors.data().chunks(d * d))
        {
            let sq: f64 = c.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
            let w = (-sq * inv_t2).exp();
            if w == 0.0 {
                continue;
            }
            for (gi, mi) in g.iter_mut().zip(m) {
                *gi += w * mi;
            }
        }
        for i in 0..d {
            g[i * d + i] += self.lambda;
        }
        g
    }

    /// `log det G(z) = −log det G⁻¹(z)`, without a tape.
    pub fn metric_logdet_at(&self, z: &[f64]) -> Result<f64> {
        let d = self.dim();
        let g = Tensor::new([d, d], self.inverse_metric_at(z))?;
        Ok(-linalg::logdet_spd(&g)?.item()?)
    }
}

/// A metric field on a tape. Factors are stored flattened `(N, d²)`.
#[derive(Clone, Debug)]
pub struct FieldVars {
    pub centroids: Var,
    pub factors: Var,
    /// `1 / T²`
    pub inv_t2: Var,
    pub lambda: Var,
}

impl FieldVars {
    /// Field whose centroids and factors come from the current batch:
    /// `c_i = μ_i`, `M_i = L_i L_iᵀ`.
    pub fn from_batch(means: &Var, l: &Var, temperature: &Var, lambda: &Var) -> Result<Self> {
        let s = l.shape();
        let m = l.matmul(&l.transpose()?)?.reshape(&[s[0], s[1] * s[2]])?;
        let t2 = temperature.square();
        Ok(Self {
            centroids: means.clone(),
            factors: m,
            inv_t2: t2.tape().scalar(1.0).div(&t2)?,
            lambda: lambda.clone(),
        })
    }

    pub fn dim(&self) -> usize {
        self.centroids.shape()[1]
    }

    /// `G⁻¹(z)` for each row of `z` `(B, d)`, shape `(B, d, d)`.
    pub fn inverse_metric(&self, z: &Var) -> Result<Var> {
        let d = self.dim();
        let b = z.shape()[0];
        let w = z.sq_dist(&self.centroids)?.mul(&self.inv_t2)?.neg().exp();
        let g = w.matmul(&self.factors)?.reshape(&[b, d, d])?;
        let eye = z.tape().constant(Tensor::eye(d)?);
        Ok(g.add(&eye.mul(&self.lambda)?)?)
    }
}

/// `vᵀ A v` for `A` `(B, d, d)` and `v` `(B, d)`, shape `(B)`.
pub fn quad_form(a: &Var, v: &Var) -> Result<Var> {
    let s = v.shape();
    let av = a.matmul(&v.reshape(&[s[0], s[1], 1])?)?.reshape(&s)?;
    Ok(av.mul(v)?.sum_axis(1, false)?)
}

/// `log det G(z)` per row.
pub fn metric_logdet(field: &FieldVars, z: &Var) -> Result<Var> {
    Ok(field.inverse_metric(z)?.logdet_spd()?.neg())
}

/// `ρ = L⁻ᵀ u` with `G⁻¹(z) = L Lᵀ`, so that `ρ ~ N(0, G(z))` for standard
/// normal `u`.
pub fn sample_momentum(field: &FieldVars, z: &Var, u: &Var) -> Result<Var> {
    let l = field.inverse_metric(z)?.cholesky()?;
    Ok(l.trisolve_vec(u, true)?)
}

/// `log N(ρ; 0, G(z))` per row.
pub fn momentum_log_density(field: &FieldVars, z: &Var, rho: &Var) -> Result<Var> {
    let ginv = field.inverse_metric(z)?;
    let d = field.dim() as f64;
    let quad = quad_form(&ginv, rho)?;
    Ok(ginv
        .logdet_spd()?
        .sub(&quad)?
        .scale(0.5)
        .offset(-0.5 * d * LOG_2PI))
}

/// Freezes the metric on `data`: one centroid `μ_φ(x_i)` and factor
/// `L_ψ(x_i) L_ψ(x_i)ᵀ` per datum, optionally reduced to `reduce_to`
/// medoids of the centroids.
pub fn freeze_metric(
    model: &Model<Tensor>,
    spec: &ModelSpec,
    data: &Tensor,
    reduce_to: Option<usize>,
) -> Result<MetricField> {
    if model.metric.is_none() {
        return Err(Error::Unsupported("model has no metric network".into()));
    }
    let tape = Tape::new();
    let bound = model.bind_constants(&tape);
    let x = tape.constant(data.clone());
    let (mean, _) = bound.encoder.encode(&x)?;
    let net = bound.metric.as_ref().expect("bound from a model with metric");
    let l = net.factors(&x)?;
    let field = MetricField::from_cholesky(
        (*mean.value()).clone(),
        &l.value(),
        model.temperature_value(spec),
        model.lambda_value(spec),
    )?;
    match reduce_to {
        None => Ok(field),
        Some(k) => reduce_field(&field, k),
    }
}

/// Keeps the `k` medoid centroids (Euclidean k-medoids, seed 0) and their
/// factors.
pub fn reduce_field(field: &MetricField, k: usize) -> Result<MetricField> {
    let n = field.len();
    if k == 0 || k > n {
        return Err(Error::Config(format!("cannot reduce {n} centroids to {k}")));
    }
    let d = field.dim();
    let dist = DistanceMatrix::euclidean(field.centroids.data(), d);
    let mut medoids = k_medoids(&dist, k, 0, 100)?.medoids;
    medoids.sort_unstable();
    let mut c = Vec::with_capacity(k * d);
    let mut m = Vec::with_capacity(k * d * d);
    for &i in &medoids {
        c.extend_from_slice(&field.centroids.data()[i * d..(i + 1) * d]);
        m.extend_from_slice(&field.factors.data()[i * d * d..(i + 1) * d * d]);
    }
    MetricField::new(
        Tensor::new([k, d], c)?,
        Tensor::new([k, d, d], m)?,
        field.temperature,
        field.lambda,
    )
}

/// Pull-back metric `JᵀJ + 1e-9 I` of `decoder` at `z`, with the Jacobian
/// taken by central differences of step `h`.
pub fn pullback_metric(decoder: impl Fn(&[f64]) -> Vec<f64>, z: &[f64], h: f64) -> Vec<f64> {
    let d = z.len();
    let mut cols = Vec::with_capacity(d);
    let mut zp = z.to_vec();
    for i in 0..d {
        zp[i] = z[i] + h;
        let fp = decoder(&zp);
        zp[i] = z[i] - h;
        let fm = decoder(&zp);
        zp[i] = z[i];
        cols.push(fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * h)).collect::<Vec<_>>());
    }
    let mut g = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let v: f64 = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
            g[i * d + j] = v;
            g[j * d + i] = v;
        }
        g[i * d + i] += 1e-9;
    }
    g
}
