//! Checkpoint directories: `manifest.json` plus `tensors.bin`, a flat
//! concatenation of little-endian `f32` arrays in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{hex, Baseline, Model, ModelConfig};
use crate::trainer::TrainConfig;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSORS_FILE: &str = "tensors.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    /// Offset into `tensors.bin`, in values.
    pub offset: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub crate_version: String,
    pub baseline: Baseline,
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub base_checksum: String,
    pub tensors: Vec<TensorEntry>,
    pub tensors_sha256: String,
}

fn f32_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

fn sha(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!("tmp-{}", std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Writes the checkpoint into `dir` (created if needed). Both files are
/// written to temporaries and renamed into place, the manifest last.
pub fn save_checkpoint(model: &Model, train: Option<&TrainConfig>, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    let mut offset = 0;
    for (name, trainable, t) in model.named_tensors() {
        let bytes = f32_bytes(t.data());
        entries.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            trainable,
            offset,
            sha256: sha(&bytes),
        });
        offset += t.len();
        blob.extend_from_slice(&bytes);
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        baseline: model.baseline(),
        model: model.config().clone(),
        train: train.cloned(),
        base_checksum: model.base_checksum(),
        tensors: entries,
        tensors_sha256: sha(&blob),
    };
    write_atomic(&dir.join(TENSORS_FILE), &blob)?;
    write_atomic(&dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let m: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("corrupt manifest: {e}")))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {}", m.format_version)));
    }
    Ok(m)
}

/// Loads a checkpoint. With `expect` set, a checkpoint of a different
/// regime is rejected. Nothing is returned unless every checksum and shape
/// matches.
pub fn load_checkpoint(dir: &Path, expect: Option<Baseline>) -> Result<(Model, Manifest)> {
    let manifest = read_manifest(dir)?;
    if let Some(b) = expect {
        if b != manifest.baseline {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds a {} model, expected {b}",
                manifest.baseline
            )));
        }
    }
    let blob = fs::read(dir.join(TENSORS_FILE))?;
    if sha(&blob) != manifest.tensors_sha256 {
        return Err(Error::Checkpoint("tensors.bin checksum mismatch".into()));
    }
    let mut model = Model::new(manifest.model.clone(), manifest.baseline, 0)?;
    {
        let mut slots = model.named_tensors_mut();
        if slots.len() != manifest.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "manifest lists {} tensors, model has {}",
                manifest.tensors.len(),
                slots.len()
            )));
        }
        for ((name, trainable, t), e) in slots.iter_mut().zip(&manifest.tensors) {
            if *name != e.name || t.shape() != e.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} {:?} does not match model tensor {name} {:?}",
                    e.name,
                    e.shape,
                    t.shape()
                )));
            }
            let start = e.offset * 4;
            let end = start + t.len() * 4;
            let bytes = blob
                .get(start..end)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {} runs past end of file", e.name)))?;
            if sha(bytes) != e.sha256 {
                return Err(Error::Checkpoint(format!("tensor {} checksum mismatch", e.name)));
            }
            if !*trainable {
                // The backbone is rebuilt at full precision from its seed;
                // the stored copy only has to agree with it.
                if sha(&f32_bytes(t.data())) != e.sha256 {
                    return Err(Error::Checkpoint(format!("frozen tensor {} differs from its seeded base", e.name)));
                }
                continue;
            }
            for (dst, c) in t.data_mut().iter_mut().zip(bytes.chunks_exact(4)) {
                *dst = f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64;
            }
        }
    }
    if model.base_checksum() != manifest.base_checksum {
        return Err(Error::Checkpoint("base weights checksum mismatch".into()));
    }
    Ok((model, manifest))
}

pub fn checkpoint_paths(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join(MANIFEST_FILE), dir.join(TENSORS_FILE))
}
