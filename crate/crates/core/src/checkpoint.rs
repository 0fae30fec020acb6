//! Portable checkpoints: `manifest.json` plus a little-endian `f64` blob
//! `params.bin`, both guarded by CRC32 checksums.

use std::fs;
use std::path::Path;

use autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metric::MetricField;
use crate::nn::init_params;
use crate::train::{nullable_f64, EpochRecord, ModelBundle, TrainConfig};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
    pub crc32: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobInfo {
    pub file: String,
    pub len: u64,
    pub crc32: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: TrainConfig,
    pub height: usize,
    pub width: usize,
    pub history: Vec<EpochRecord>,
    #[serde(deserialize_with = "nullable_f64")]
    pub initial_val_obj: f64,
    pub best_epoch: usize,
    pub has_field: bool,
    pub tensors: Vec<TensorEntry>,
    pub blob: BlobInfo,
}

fn bytes_of(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn named_tensors(bundle: &ModelBundle) -> Vec<(String, Tensor)> {
    let mut out: Vec<(String, Tensor)> = bundle
        .params
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    if let Some(f) = &bundle.field {
        out.push(("field.centroids".into(), f.centroids.clone()));
        out.push(("field.factors".into(), f.factors.clone()));
        out.push(("field.temperature".into(), Tensor::scalar(f.temperature)));
        out.push(("field.lambda".into(), Tensor::scalar(f.lambda)));
    }
    out
}

pub fn save_checkpoint(bundle: &ModelBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in named_tensors(bundle) {
        let bytes = bytes_of(&t);
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset: blob.len() as u64,
            crc32: crc32fast::hash(&bytes),
        });
        blob.extend(bytes);
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: bundle.config.clone(),
        height: bundle.height,
        width: bundle.width,
        history: bundle.history.clone(),
        initial_val_obj: bundle.initial_val_obj,
        best_epoch: bundle.best_epoch,
        has_field: bundle.field.is_some(),
        tensors,
        blob: BlobInfo {
            file: BLOB_FILE.into(),
            len: blob.len() as u64,
            crc32: crc32fast::hash(&blob),
        },
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let bpath = dir.join(BLOB_FILE);
    fs::write(&bpath, &blob).map_err(|e| Error::io(&bpath, e))?;
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<ModelBundle> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", mpath.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} is not supported (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let bpath = dir.join(&manifest.blob.file);
    let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    if blob.len() as u64 != manifest.blob.len {
        return Err(Error::Checkpoint(format!(
            "blob has {} bytes, manifest expects {}",
            blob.len(),
            manifest.blob.len
        )));
    }
    if crc32fast::hash(&blob) != manifest.blob.crc32 {
        return Err(Error::Checkpoint("blob checksum mismatch".into()));
    }
    let mut values = std::collections::HashMap::new();
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let bytes = blob
            .get(start..start + 8 * n)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {} exceeds the blob", e.name)))?;
        if crc32fast::hash(bytes) != e.crc32 {
            return Err(Error::Checkpoint(format!("checksum mismatch for tensor {}", e.name)));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        values.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
    }
    let mut take = |name: &str| {
        values
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    };
    let skeleton = init_params(&manifest.config.model, 0)?;
    let mut params_vec = Vec::new();
    for (name, t) in skeleton.named() {
        let v = take(&name)?;
        if v.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?}, model expects {:?}",
                v.shape(),
                t.shape()
            )));
        }
        params_vec.push(v);
    }
    let params = skeleton.rebuild(params_vec);
    let field = if manifest.has_field {
        Some(MetricField::new(
            take("field.centroids")?,
            take("field.factors")?,
            take("field.temperature")?.item()?,
            take("field.lambda")?.item()?,
        )?)
    } else {
        None
    };
    Ok(ModelBundle {
        config: manifest.config,
        params,
        field,
        history: manifest.history,
        initial_val_obj: manifest.initial_val_obj,
        best_epoch: manifest.best_epoch,
        height: manifest.height,
        width: manifest.width,
    })
}
