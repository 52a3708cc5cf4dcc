//! Checkpoint files: a JSON manifest plus a blob of little-endian `f32`s.
//!
//! `model.json` lists every parameter with its shape and byte offset;
//! `model.bin` holds the values back to back in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MODEL_TAG: &str = "infocal-model";
pub const LM_TAG: &str = "infocal-lm";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub tag: String,
    pub dtype: String,
    pub blob: String,
    pub params: Vec<ManifestEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub fn save(manifest_path: &Path, tag: &str, store: &ParamStore, meta: serde_json::Value) -> Result<()> {
    let blob = blob_path(manifest_path);
    let mut bytes = Vec::with_capacity(store.num_scalars() * 4);
    let mut params = Vec::with_capacity(store.len());
    for (name, t) in store.iter() {
        params.push(ManifestEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: bytes.len() as u64,
        });
        for &v in t.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        tag: tag.to_string(),
        dtype: "f32le".to_string(),
        blob: blob
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        params,
        meta,
    };
    if let Some(dir) = manifest_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&blob, &bytes).map_err(|e| Error::io(&blob, e))?;
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(manifest_path, json).map_err(|e| Error::io(manifest_path, e))?;
    Ok(())
}

/// Loads a checkpoint, rejecting it unless its tag equals `expected_tag`.
pub fn load(manifest_path: &Path, expected_tag: &str) -> Result<(ParamStore, Manifest)> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.tag != expected_tag {
        return Err(Error::Data(format!(
            "{}: checkpoint tag `{}`, expected `{expected_tag}`",
            manifest_path.display(),
            manifest.tag
        )));
    }
    if manifest.dtype != "f32le" {
        return Err(Error::Data(format!("unsupported checkpoint dtype `{}`", manifest.dtype)));
    }
    let blob = manifest_path
        .parent()
        .unwrap_or(Path::new("."))
        .join(&manifest.blob);
    let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
    let mut store = ParamStore::new();
    for entry in &manifest.params {
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + 4 * n;
        let raw = bytes.get(start..end).ok_or_else(|| {
            Error::Data(format!("{}: blob too short for `{}`", blob.display(), entry.name))
        })?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        store.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?);
    }
    Ok((store, manifest))
}
