//! Checkpoint format: a JSON manifest (`manifest.json`) listing every tensor's
//! name, shape and blob file, plus the seed and step, and one raw
//! little-endian `f32` blob per tensor under `tensors/`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{NumericsError, ParamStore, Tensor};

pub const CHECKPOINT_FORMAT: &str = "struid-checkpoint-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub seed: u64,
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
    /// Free-form metadata owned by the caller (model configuration etc.).
    #[serde(default)]
    pub extra: serde_json::Value,
}

fn blob_name(name: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.' { c } else { '~' })
        .collect();
    format!("tensors/{safe}.f32")
}

pub fn save_checkpoint(
    dir: &Path,
    params: &ParamStore,
    seed: u64,
    step: u64,
    extra: serde_json::Value,
) -> Result<(), NumericsError> {
    fs::create_dir_all(dir.join("tensors")).map_err(|e| NumericsError::io(dir, e))?;
    let mut tensors = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        let file = blob_name(name);
        let mut bytes = Vec::with_capacity(t.numel() * 4);
        for &v in t.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| NumericsError::io(&path, e))?;
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            file,
        });
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        seed,
        step,
        tensors,
        extra,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| NumericsError::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<(ParamStore, CheckpointManifest), NumericsError> {
    let path: PathBuf = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| NumericsError::io(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)
        .map_err(|e| NumericsError::Format(format!("{}: {e}", path.display())))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(NumericsError::Format(format!(
            "{}: unknown checkpoint format {:?}",
            path.display(),
            manifest.format
        )));
    }
    let mut store = ParamStore::new();
    for entry in &manifest.tensors {
        let blob = dir.join(&entry.file);
        let bytes = fs::read(&blob).map_err(|e| NumericsError::io(&blob, e))?;
        let numel: usize = entry.shape.iter().product();
        if bytes.len() != numel * 4 {
            return Err(NumericsError::Format(format!(
                "{}: expected {} bytes for shape {:?}, found {}",
                blob.display(),
                numel * 4,
                entry.shape,
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        store.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data));
    }
    Ok((store, manifest))
}

/// Rounds every parameter to `f32` precision, matching what a save/load
/// cycle produces.
pub fn round_to_f32(params: &mut ParamStore) {
    for id in 0..params.len() {
        params
            .by_id_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = *v as f32 as f64);
    }
}
