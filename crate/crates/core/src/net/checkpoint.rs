//! Checkpoint files: a JSON manifest naming every tensor with its shape and
//! byte range, next to a blob of little-endian IEEE-754 values.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    /// Length in bytes.
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: String,
    pub step: u64,
    /// Free-form run configuration; compared by callers on load.
    pub config: serde_json::Value,
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub step: u64,
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    let s = stem.as_os_str().to_string_lossy();
    (
        PathBuf::from(format!("{s}.manifest.json")),
        PathBuf::from(format!("{s}.bin")),
    )
}

/// Writes `<stem>.manifest.json` and `<stem>.bin`.
pub fn save_checkpoint<T: Scalar>(stem: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    let (manifest_path, blob_path) = paths(stem);
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(ckpt.tensors.len());
    for (name, t) in &ckpt.tensors {
        let offset = blob.len();
        for &x in t.data() {
            x.write_le(&mut blob);
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            bytes: blob.len() - offset,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dtype: T::DTYPE.to_string(),
        step: ckpt.step,
        config: ckpt.config.clone(),
        blob: blob_path
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default(),
        tensors: entries,
    };
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&manifest_path, e))
}

pub fn read_manifest(stem: &Path) -> Result<Manifest> {
    let (manifest_path, _) = paths(stem);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&manifest_path, e.to_string()))
}

/// Reads a checkpoint written by [`save_checkpoint`] with the same dtype.
pub fn load_checkpoint<T: Scalar>(stem: &Path) -> Result<Checkpoint<T>> {
    let (manifest_path, blob_path) = paths(stem);
    let manifest = read_manifest(stem)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::format(
            &manifest_path,
            format!("unsupported version {}", manifest.format_version),
        ));
    }
    if manifest.dtype != T::DTYPE {
        return Err(Error::format(
            &manifest_path,
            format!("checkpoint holds {} tensors, expected {}", manifest.dtype, T::DTYPE),
        ));
    }
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        if e.bytes != n * T::BYTES || e.offset + e.bytes > blob.len() {
            return Err(Error::format(
                &blob_path,
                format!("tensor {} has an inconsistent byte range", e.name),
            ));
        }
        let data = blob[e.offset..e.offset + e.bytes]
            .chunks_exact(T::BYTES)
            .map(T::read_le)
            .collect();
        tensors.push((e.name.clone(), Tensor::from_vec(&e.shape, data)));
    }
    Ok(Checkpoint {
        step: manifest.step,
        config: manifest.config,
        tensors,
    })
}
