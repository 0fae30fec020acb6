//! Adam training with best-epoch retention and early stopping.

use autodiff::{Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::flow::{elbo, elbo_value, FieldSource, Noise};
use crate::metric::{freeze_metric, MetricField};
use crate::nn::{init_params, Model, ModelKind, ModelSpec};
use crate::rng::{self, tag};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelSpec,
    pub epochs_max: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patience: usize,
    pub seed: u64,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
    /// Noise passes averaged for the validation objective.
    pub val_passes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelSpec::default(),
            epochs_max: 300,
            batch_size: 60,
            learning_rate: 1e-3,
            patience: 100,
            seed: 0,
            grad_clip: 100.0,
            val_passes: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs_max == 0 || self.batch_size == 0 || self.patience == 0 || self.val_passes == 0 {
            return Err(Error::Config(
                "epochs_max, batch_size, patience and val_passes must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.grad_clip > 0.0) {
            return Err(Error::Config("learning_rate and grad_clip must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(deserialize_with = "nullable_f64")]
    pub train_obj: f64,
    #[serde(deserialize_with = "nullable_f64")]
    pub val_obj: f64,
}

/// JSON writes non-finite floats as `null`; read them back as NaN.
pub(crate) fn nullable_f64<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

/// A trained model with everything needed to evaluate it.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    /// Training configuration with `model.data_dim` resolved.
    pub config: TrainConfig,
    pub params: Model<Tensor>,
    /// Frozen metric (RHVAE only).
    pub field: Option<MetricField>,
    pub history: Vec<EpochRecord>,
    /// Validation objective before the first update.
    pub initial_val_obj: f64,
    /// Epoch whose parameters were retained; 0 means the initialization.
    pub best_epoch: usize,
    pub height: usize,
    pub width: usize,
}

impl ModelBundle {
    pub fn spec(&self) -> &ModelSpec {
        &self.config.model
    }

    pub fn best_val_obj(&self) -> f64 {
        self.history
            .iter()
            .find(|r| r.epoch == self.best_epoch)
            .map_or(self.initial_val_obj, |r| r.val_obj)
    }

    pub fn field_source(&self) -> FieldSource<'_> {
        match &self.field {
            Some(f) => FieldSource::Frozen(f),
            None => FieldSource::Batch,
        }
    }

    /// History as CSV with header `epoch,train_obj,val_obj`.
    pub fn history_csv(&self) -> String {
        let mut s = String::from("epoch,train_obj,val_obj\n");
        for r in &self.history {
            s.push_str(&format!("{},{},{}\n", r.epoch, r.train_obj, r.val_obj));
        }
        s
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, sizes: &[usize]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Descends along `grads`.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Scales `grads` so that their joint Euclidean norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::squared_norm).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Validation objective: the model's ELBO on `val`, averaged over
/// `config.val_passes` noise draws. RHVAE models use the metric frozen on
/// `train` at the current parameters.
pub fn validation_objective(
    params: &Model<Tensor>,
    spec: &ModelSpec,
    train: &Dataset,
    val: &Dataset,
    config: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    let field = match spec.kind {
        ModelKind::Rhvae => Some(freeze_metric(params, spec, &train.all(), None)?),
        _ => None,
    };
    let source = field.as_ref().map_or(FieldSource::Batch, FieldSource::Frozen);
    let x = val.all();
    let passes = config.val_passes;
    let mut total = 0.0;
    for p in 0..passes {
        let mut r = rng::stream(config.seed, tag::VAL_NOISE, (epoch * passes + p) as u64);
        let noise = Noise::draw(&mut r, val.len(), spec.latent_dim);
        total += elbo_value(params, spec, &x, &noise, source)?;
    }
    Ok(total / passes as f64)
}

fn train_step(
    params: &Model<Tensor>,
    spec: &ModelSpec,
    x: Tensor,
    noise: &Noise,
    adam: &mut Adam,
    clip: f64,
) -> Result<(Model<Tensor>, f64)> {
    let tape = Tape::new();
    let bound = params.bind_leaves(&tape);
    let obj = elbo(&bound, spec, &tape.constant(x), noise, FieldSource::Batch)?;
    let value = obj.item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite("training objective".into()));
    }
    let grads = tape.backward(&obj.neg())?;
    let mut g: Vec<Tensor> = bound.named().into_iter().map(|(_, v)| grads.wrt(v)).collect();
    if g.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    clip_global_norm(&mut g, clip);
    let mut values: Vec<Tensor> = params.named().into_iter().map(|(_, t)| t.clone()).collect();
    adam.step(&mut values, &g);
    Ok((params.rebuild(values), value))
}

pub fn train(train_set: &Dataset, val: &Dataset, config: &TrainConfig) -> Result<ModelBundle> {
    train_with(train_set, val, config, |_| {})
}

/// Trains and calls `observe` after every epoch.
pub fn train_with(
    train_set: &Dataset,
    val: &Dataset,
    config: &TrainConfig,
    mut observe: impl FnMut(&EpochRecord),
) -> Result<ModelBundle> {
    config.validate()?;
    if train_set.is_empty() || val.is_empty() {
        return Err(Error::Data("training and validation sets must be non-empty".into()));
    }
    if train_set.dim() != val.dim() {
        return Err(Error::Data("training and validation image sizes differ".into()));
    }
    let mut config = config.clone();
    config.model.data_dim = train_set.dim();
    let spec = config.model.clone();
    let mut params = init_params(&spec, config.seed)?;
    let sizes: Vec<usize> = params.named().iter().map(|(_, t)| t.numel()).collect();
    let mut adam = Adam::new(config.learning_rate, &sizes);

    let initial_val_obj = validation_objective(&params, &spec, train_set, val, &config, 0)?;
    let mut best = (initial_val_obj, params.clone(), 0usize);
    let mut history = Vec::new();
    let mut since_best = 0;
    for epoch in 1..=config.epochs_max {
        let mut total = 0.0;
        for (b, idx) in batches(train_set.len(), config.batch_size, config.seed, epoch as u64)
            .into_iter()
            .enumerate()
        {
            let mut r = rng::stream(config.seed, tag::TRAIN_NOISE, ((epoch as u64) << 24) | b as u64);
            let noise = Noise::draw(&mut r, idx.len(), spec.latent_dim);
            let (next, value) = train_step(&params, &spec, train_set.batch(&idx), &noise, &mut adam, config.grad_clip)
                .map_err(|e| Error::Training {
                    epoch,
                    batch: b,
                    source: Box::new(e),
                })?;
            params = next;
            total += value * idx.len() as f64;
        }
        let val_obj = validation_objective(&params, &spec, train_set, val, &config, epoch).map_err(|e| {
            Error::Training {
                epoch,
                batch: usize::MAX,
                source: Box::new(e),
            }
        })?;
        let record = EpochRecord {
            epoch,
            train_obj: total / train_set.len() as f64,
            val_obj,
        };
        observe(&record);
        history.push(record);
        if val_obj > best.0 {
            best = (val_obj, params.clone(), epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    let (_, params, best_epoch) = best;
    let field = match spec.kind {
        ModelKind::Rhvae => Some(freeze_metric(&params, &spec, &train_set.all(), spec.metric.reduce_to)?),
        _ => None,
    };
    Ok(ModelBundle {
        config,
        params,
        field,
        history,
        initial_val_obj,
        best_epoch,
        height: train_set.height,
        width: train_set.width,
    })
}
