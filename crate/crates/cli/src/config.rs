//! Run configuration: defaults, JSON config files and `--set` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use rhvae::data::{self, Dataset, SplitSpec};
use rhvae::geometry::{GeodesicConfig, InterpolationMode};
use rhvae::{FlowConfig, MetricConfig, ModelKind, ModelSpec, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

pub const SEED_ENV: &str = "RHVAE_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Shapes,
    Idx,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: Source,
    /// Image file (IDX or CSV).
    pub images: Option<PathBuf>,
    /// IDX label file.
    pub labels: Option<PathBuf>,
    /// IDX classes to keep.
    pub classes: Vec<u8>,
    pub per_class: usize,
    pub n_circles: usize,
    pub n_rings: usize,
    pub side: usize,
    pub train_fraction: f64,
    /// Split seed; the global seed when absent.
    pub split_seed: Option<u64>,
    pub balanced: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: Source::Shapes,
            images: None,
            labels: None,
            classes: Vec::new(),
            per_class: 100,
            n_circles: 100,
            n_rings: 100,
            side: 32,
            train_fraction: 0.8,
            split_seed: None,
            balanced: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub latent_dim: usize,
    pub hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let s = ModelSpec::default();
        Self {
            kind: s.kind,
            latent_dim: s.latent_dim,
            hidden: s.hidden,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs_max: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patience: usize,
    pub grad_clip: f64,
    pub val_passes: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs_max: t.epochs_max,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            patience: t.patience,
            grad_clip: t.grad_clip,
            val_passes: t.val_passes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub samples: usize,
    pub repeats: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { samples: 200, repeats: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterpolateSection {
    /// Training-set index pairs; empty picks the first training image of the
    /// first and last class.
    pub pairs: Vec<[usize; 2]>,
    pub modes: Vec<InterpolationMode>,
    /// Keep every `every`-th curve point as a frame.
    pub every: usize,
    pub geodesic: GeodesicConfig,
}

impl Default for InterpolateSection {
    fn default() -> Self {
        Self {
            pairs: Vec::new(),
            modes: vec![InterpolationMode::Affine, InterpolationMode::Geodesic],
            every: 5,
            geodesic: GeodesicConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapsSection {
    pub res: usize,
    /// Training-set index whose embedding is the distance-map source.
    pub source_index: usize,
}

impl Default for MapsSection {
    fn default() -> Self {
        Self { res: 200, source_index: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSection {
    pub samples: usize,
    pub cols: usize,
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self { samples: 30, cols: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    All,
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSection {
    pub seeds: Vec<u64>,
    pub res: usize,
    pub max_iters: usize,
    pub subset: Subset,
}

impl Default for ClusterSection {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            res: 200,
            max_iters: 100,
            subset: Subset::All,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed for data generation, splits, initialization and noise.
    pub seed: u64,
    pub output: PathBuf,
    pub data: DataConfig,
    pub model: ModelSection,
    pub flow: FlowConfig,
    pub metric: MetricConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub interpolate: InterpolateSection,
    pub maps: MapsSection,
    pub generate: GenerateSection,
    pub cluster: ClusterSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            model: ModelSection::default(),
            flow: FlowConfig::default(),
            metric: MetricConfig::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            interpolate: InterpolateSection::default(),
            maps: MapsSection::default(),
            generate: GenerateSection::default(),
            cluster: ClusterSection::default(),
        }
    }
}

/// Recursively overlays `top` onto `base`.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

/// Applies `a.b.c=value`; the value is parsed as JSON, falling back to a
/// plain string.
fn set_path(root: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not of the form key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("{path}: {} is not a section", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        node = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one key")
}

/// Defaults, then `RHVAE_SEED`, then the config file, then overrides.
pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut v = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
    if let Ok(s) = std::env::var(SEED_ENV) {
        let seed: u64 = s
            .parse()
            .map_err(|_| CliError::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
        v["seed"] = seed.into();
    }
    if let Some(p) = file {
        let text = fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
        let top: Value =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
        merge(&mut v, top);
    }
    for o in overrides {
        set_path(&mut v, o)?;
    }
    serde_json::from_value(v).map_err(|e| CliError::Config(e.to_string()))
}

impl RunConfig {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            kind: self.model.kind,
            data_dim: 0,
            latent_dim: self.model.latent_dim,
            hidden: self.model.hidden,
            flow: self.flow.clone(),
            metric: self.metric.clone(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            model: self.model_spec(),
            epochs_max: t.epochs_max,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            patience: t.patience,
            seed: self.seed,
            grad_clip: t.grad_clip,
            val_passes: t.val_passes,
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            train_fraction: self.data.train_fraction,
            seed: self.data.split_seed.unwrap_or(self.seed),
            balanced: self.data.balanced,
        }
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.output.join("model")
    }

    pub fn load_dataset(&self) -> Result<Dataset, CliError> {
        let d = &self.data;
        let need = |p: &Option<PathBuf>, what: &str| {
            p.clone()
                .ok_or_else(|| CliError::Config(format!("data.{what} is required for source {:?}", d.source)))
        };
        Ok(match d.source {
            Source::Shapes => data::make_shapes(d.n_circles, d.n_rings, d.side, self.seed)?,
            Source::Idx => {
                if d.classes.is_empty() {
                    return Err(CliError::Config("data.classes must list at least one class".into()));
                }
                data::read_idx(&need(&d.images, "images")?, &need(&d.labels, "labels")?, &d.classes, d.per_class, self.seed)?
            }
            Source::Csv => data::read_csv(&need(&d.images, "images")?)?,
        })
    }

    /// The full dataset and its train/test split.
    pub fn datasets(&self) -> Result<(Dataset, Dataset, Dataset), CliError> {
        let full = self.load_dataset()?;
        let (train, test) = data::split(&full, &self.split_spec())?;
        Ok((full, train, test))
    }
}
