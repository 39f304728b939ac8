// SPDX-License-Identifier: Apache-2.0

//! Checkpoint format: `manifest.json` listing `(name, shape, offset)` for each
//! parameter plus one blob of row-major little-endian `f32` values.

use crate::error::TensorError;
use crate::param::ParamStore;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "weights.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in elements (not bytes) into the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    /// Free-form run configuration echo.
    pub config: serde_json::Value,
    pub params: Vec<ParamEntry>,
    pub total_len: usize,
    pub blob: String,
}

pub fn save(store: &ParamStore<f32>, dir: &Path, config: serde_json::Value) -> Result<CheckpointManifest, TensorError> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(store.len());
    let mut blob = Vec::with_capacity(store.numel() * 4);
    let mut offset = 0;
    for (_, p) in store.iter() {
        entries.push(ParamEntry { name: p.name.clone(), shape: p.tensor.shape().to_vec(), offset });
        for x in p.tensor.data() {
            blob.extend_from_slice(&x.to_le_bytes());
        }
        offset += p.tensor.len();
    }
    let manifest = CheckpointManifest { config, params: entries, total_len: offset, blob: BLOB_FILE.into() };
    fs::write(dir.join(BLOB_FILE), blob)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest, TensorError> {
    Ok(serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?)
}

/// Loads weights into an already-constructed store with matching names and shapes.
pub fn load_into(store: &mut ParamStore<f32>, dir: &Path) -> Result<CheckpointManifest, TensorError> {
    let manifest = read_manifest(dir)?;
    let bytes = fs::read(dir.join(&manifest.blob))?;
    if bytes.len() != manifest.total_len * 4 {
        return Err(TensorError::Checkpoint(format!(
            "blob has {} bytes, manifest expects {}",
            bytes.len(),
            manifest.total_len * 4
        )));
    }
    let declared: usize = manifest.params.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if declared != manifest.total_len {
        return Err(TensorError::Checkpoint(format!("entries cover {declared} of {} values", manifest.total_len)));
    }
    if manifest.params.len() != store.len() {
        return Err(TensorError::Checkpoint(format!(
            "checkpoint has {} parameters, model has {}",
            manifest.params.len(),
            store.len()
        )));
    }
    for e in &manifest.params {
        let id = store
            .id(&e.name)
            .ok_or_else(|| TensorError::Checkpoint(format!("unknown parameter {}", e.name)))?;
        let p = store.get_mut(id);
        if p.tensor.shape() != e.shape.as_slice() {
            return Err(TensorError::Checkpoint(format!(
                "{}: shape {:?} vs model {:?}",
                e.name,
                e.shape,
                p.tensor.shape()
            )));
        }
        let len = p.tensor.len();
        let end = e.offset + len;
        if end > manifest.total_len {
            return Err(TensorError::Checkpoint(format!("{} runs past the blob", e.name)));
        }
        let data: Vec<f32> = bytes[e.offset * 4..end * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        p.tensor = Tensor::new(e.shape.clone(), data)?;
    }
    Ok(manifest)
}
