//! Encoder, Bernoulli decoder and metric network, generic over the parameter
//! carrier: `Model<Tensor>` holds values, `Model<Var>` is bound to a tape.

use autodiff::{Tape, Tensor, Var};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::metric::MetricConfig;
use crate::rng::{self, tag};

/// Decoder outputs are clamped into `(PROB_EPS, 1 − PROB_EPS)`.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Vae,
    Hvae,
    Rhvae,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Vae => "vae",
            ModelKind::Hvae => "hvae",
            ModelKind::Rhvae => "rhvae",
        })
    }
}

/// Architecture and flow hyperparameters of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Data dimension `D`; filled in from the dataset when training.
    pub data_dim: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub flow: FlowConfig,
    pub metric: MetricConfig,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            kind: ModelKind::Rhvae,
            data_dim: 0,
            latent_dim: 2,
            hidden: 400,
            flow: FlowConfig::default(),
            metric: MetricConfig::default(),
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.latent_dim == 0 || self.hidden == 0 {
            return Err(Error::Config("data_dim, latent_dim and hidden must be positive".into()));
        }
        if self.kind != ModelKind::Vae {
            self.flow.validate()?;
        }
        if self.kind == ModelKind::Rhvae {
            self.metric.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    /// `(in, out)`
    pub w: T,
    /// `(out)`
    pub b: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    pub hidden: Linear<T>,
    pub mean: Linear<T>,
    pub log_var: Linear<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder<T> {
    pub hidden: Linear<T>,
    pub out: Linear<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricNet<T> {
    pub hidden: Linear<T>,
    pub diag: Linear<T>,
    /// Absent when `d = 1`.
    pub lower: Option<Linear<T>>,
}

/// All trainable quantities of a model. The optional scalars are present
/// only when the corresponding hyperparameter is learned; they hold logs.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
    pub metric: Option<MetricNet<T>>,
    pub log_eps: Option<T>,
    pub log_temperature: Option<T>,
    pub log_lambda: Option<T>,
}

impl<T> Linear<T> {
    fn map<U>(&self, p: &str, f: &mut impl FnMut(&str, &T) -> U) -> Linear<U> {
        Linear {
            w: f(&format!("{p}.w"), &self.w),
            b: f(&format!("{p}.b"), &self.b),
        }
    }
}

impl<T> Model<T> {
    /// Applies `f` to every parameter in a fixed order, passing its name.
    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> Model<U> {
        let f = &mut f;
        let encoder = Encoder {
            hidden: self.encoder.hidden.map("encoder.hidden", f),
            mean: self.encoder.mean.map("encoder.mean", f),
            log_var: self.encoder.log_var.map("encoder.log_var", f),
        };
        let decoder = Decoder {
            hidden: self.decoder.hidden.map("decoder.hidden", f),
            out: self.decoder.out.map("decoder.out", f),
        };
        let metric = self.metric.as_ref().map(|m| MetricNet {
            hidden: m.hidden.map("metric.hidden", f),
            diag: m.diag.map("metric.diag", f),
            lower: m.lower.as_ref().map(|l| l.map("metric.lower", f)),
        });
        Model {
            encoder,
            decoder,
            metric,
            log_eps: self.log_eps.as_ref().map(|t| f("log_eps", t)),
            log_temperature: self.log_temperature.as_ref().map(|t| f("log_temperature", t)),
            log_lambda: self.log_lambda.as_ref().map(|t| f("log_lambda", t)),
        }
    }

    pub fn named(&self) -> Vec<(String, &T)> {
        let mut names = Vec::new();
        self.map(|n, _| names.push(n.to_string()));
        let mut refs = Vec::new();
        collect_refs(self, &mut refs);
        names.into_iter().zip(refs).collect()
    }

    /// Rebuilds a model of the same structure from values in `map` order.
    pub fn rebuild<U>(&self, values: Vec<U>) -> Model<U> {
        let mut it = values.into_iter();
        self.map(|n, _| it.next().unwrap_or_else(|| panic!("missing value for {n}")))
    }
}

fn collect_refs<'a, T>(m: &'a Model<T>, out: &mut Vec<&'a T>) {
    let lin = |l: &'a Linear<T>, out: &mut Vec<&'a T>| {
        out.push(&l.w);
        out.push(&l.b);
    };
    lin(&m.encoder.hidden, out);
    lin(&m.encoder.mean, out);
    lin(&m.encoder.log_var, out);
    lin(&m.decoder.hidden, out);
    lin(&m.decoder.out, out);
    if let Some(mn) = &m.metric {
        lin(&mn.hidden, out);
        lin(&mn.diag, out);
        if let Some(l) = &mn.lower {
            lin(l, out);
        }
    }
    for t in [&m.log_eps, &m.log_temperature, &m.log_lambda].into_iter().flatten() {
        out.push(t);
    }
}

impl Model<Tensor> {
    pub fn bind_leaves(&self, tape: &Tape) -> Model<Var> {
        self.map(|_, t| tape.leaf(t.clone()))
    }

    pub fn bind_constants(&self, tape: &Tape) -> Model<Var> {
        self.map(|_, t| tape.constant(t.clone()))
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }
}

pub(crate) fn glorot(rng: &mut rng::Rng, fan_in: usize, fan_out: usize) -> Linear<Tensor> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let w = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..=bound)).collect();
    Linear {
        w: Tensor::new([fan_in, fan_out], w).expect("positive layer sizes"),
        b: Tensor::zeros([fan_out]).expect("positive layer sizes"),
    }
}

/// Glorot-uniform weights and zero biases, deterministic in `seed`.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<Model<Tensor>> {
    spec.validate()?;
    let (dd, d, h) = (spec.data_dim, spec.latent_dim, spec.hidden);
    let mut rng = rng::stream(seed, tag::INIT, 0);
    let encoder = Encoder {
        hidden: glorot(&mut rng, dd, h),
        mean: glorot(&mut rng, h, d),
        log_var: glorot(&mut rng, h, d),
    };
    let decoder = Decoder {
        hidden: glorot(&mut rng, d, h),
        out: glorot(&mut rng, h, dd),
    };
    let rh = spec.kind == ModelKind::Rhvae;
    let metric = rh.then(|| {
        let hm = spec.metric.hidden;
        MetricNet {
            hidden: glorot(&mut rng, dd, hm),
            diag: glorot(&mut rng, hm, d),
            lower: (d > 1).then(|| glorot(&mut rng, hm, d * (d - 1) / 2)),
        }
    });
    let learned = |on: bool, v: f64| on.then(|| Tensor::scalar(v.ln()));
    Ok(Model {
        encoder,
        decoder,
        metric,
        log_eps: learned(spec.kind != ModelKind::Vae && spec.flow.learn_eps, spec.flow.eps),
        log_temperature: learned(rh && spec.metric.learn_temperature, spec.metric.temperature),
        log_lambda: learned(rh && spec.metric.learn_lambda, spec.metric.lambda),
    })
}

impl Linear<Var> {
    pub fn forward(&self, x: &Var) -> Result<Var> {
        Ok(x.matmul(&self.w)?.add(&self.b)?)
    }
}

fn checked(v: Var, layer: &str) -> Result<Var> {
    if v.value().is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("activations of {layer}")))
    }
}

impl Encoder<Var> {
    /// `(μ, log σ²)` for a `(B, D)` batch.
    pub fn encode(&self, x: &Var) -> Result<(Var, Var)> {
        let h = checked(self.hidden.forward(x)?.relu(), "encoder.hidden")?;
        let mean = checked(self.mean.forward(&h)?, "encoder.mean")?;
        let log_var = checked(self.log_var.forward(&h)?, "encoder.log_var")?;
        Ok((mean, log_var))
    }
}

impl Decoder<Var> {
    /// Bernoulli means `π_θ(z)` clamped away from 0 and 1.
    pub fn decode(&self, z: &Var) -> Result<Var> {
        let h = self.hidden.forward(z)?.relu();
        Ok(self.out.forward(&h)?.sigmoid().clamp(PROB_EPS, 1.0 - PROB_EPS))
    }
}

/// `Σ_i x_i log π_i + (1 − x_i) log(1 − π_i)` per row, shape `(B)`.
pub fn bernoulli_log_lik(x: &Var, probs: &Var) -> Result<Var> {
    let one_minus_x = x.neg().offset(1.0);
    let one_minus_p = probs.neg().offset(1.0);
    let ll = x.mul(&probs.log())?.add(&one_minus_x.mul(&one_minus_p.log())?)?;
    Ok(ll.sum_axis(1, false)?)
}

fn scatter(d: usize, strict_lower: bool) -> Tensor {
    let entries: Vec<(usize, usize)> = if strict_lower {
        (0..d).flat_map(|i| (0..i).map(move |j| (i, j))).collect()
    } else {
        (0..d).map(|i| (i, i)).collect()
    };
    let mut data = vec![0.0; entries.len() * d * d];
    for (k, (i, j)) in entries.iter().enumerate() {
        data[k * d * d + i * d + j] = 1.0;
    }
    Tensor::new([entries.len(), d * d], data).expect("d > 1 for strict lower part")
}

impl MetricNet<Var> {
    /// Lower-triangular factors `L_ψ(x)`, shape `(B, d, d)`, with
    /// exponentiated diagonal.
    pub fn factors(&self, x: &Var) -> Result<Var> {
        let tape = x.tape();
        let h = self.hidden.forward(x)?.relu();
        let diag = self.diag.forward(&h)?.exp();
        let b = x.shape()[0];
        let d = diag.shape()[1];
        let mut flat = diag.matmul(&tape.constant(scatter(d, false)))?;
        if let Some(lower) = &self.lower {
            let low = lower.forward(&h)?;
            flat = flat.add(&low.matmul(&tape.constant(scatter(d, true)))?)?;
        }
        Ok(flat.reshape(&[b, d, d])?)
    }
}

impl Model<Var> {
    fn scalar_or(&self, learned: &Option<Var>, tape: &Tape, fixed: f64) -> Var {
        match learned {
            Some(v) => v.exp(),
            None => tape.scalar(fixed),
        }
    }

    pub fn eps(&self, spec: &ModelSpec, tape: &Tape) -> Var {
        self.scalar_or(&self.log_eps, tape, spec.flow.eps)
    }

    pub fn temperature(&self, spec: &ModelSpec, tape: &Tape) -> Var {
        self.scalar_or(&self.log_temperature, tape, spec.metric.temperature)
    }

    pub fn lambda(&self, spec: &ModelSpec, tape: &Tape) -> Var {
        self.scalar_or(&self.log_lambda, tape, spec.metric.lambda)
    }
}

impl Model<Tensor> {
    /// Current value of a possibly learned positive scalar.
    fn scalar_value(t: &Option<Tensor>, fixed: f64) -> f64 {
        t.as_ref().map_or(fixed, |v| v.data()[0].exp())
    }

    pub fn eps_value(&self, spec: &ModelSpec) -> f64 {
        Self::scalar_value(&self.log_eps, spec.flow.eps)
    }

    pub fn temperature_value(&self, spec: &ModelSpec) -> f64 {
        Self::scalar_value(&self.log_temperature, spec.metric.temperature)
    }

    pub fn lambda_value(&self, spec: &ModelSpec) -> f64 {
        Self::scalar_value(&self.log_lambda, spec.metric.lambda)
    }

    /// Posterior means `μ_φ(x)` of a `(N, D)` data matrix.
    pub fn encode_means(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let enc = self.bind_constants(&tape).encoder;
        let (mean, _) = enc.encode(&tape.constant(x.clone()))?;
        Ok((*mean.value()).clone())
    }

    /// `π_θ(z)` for a `(N, d)` latent matrix.
    pub fn decode_values(&self, z: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let dec = self.bind_constants(&tape).decoder;
        let p = dec.decode(&tape.constant(z.clone()))?;
        Ok((*p.value()).clone())
    }
}
