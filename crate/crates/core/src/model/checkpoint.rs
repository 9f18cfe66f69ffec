//! Checkpoint file: one line of JSON manifest, then raw little-endian tensor
//! blobs in manifest order.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamSet, Real};

pub const CHECKPOINT_MAGIC: &str = "SEGCLCKPT1";

#[derive(Clone, Debug, PartialEq)]
pub enum TensorBlob {
    F32 { path: String, data: Vec<f32> },
    F64 { path: String, data: Vec<f64> },
}

impl TensorBlob {
    pub fn path(&self) -> &str {
        match self {
            TensorBlob::F32 { path, .. } | TensorBlob::F64 { path, .. } => path,
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorBlob::F32 { data, .. } => data.len(),
            TensorBlob::F64 { data, .. } => data.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointFile {
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorBlob>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    path: String,
    dtype: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    magic: String,
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

pub fn write_checkpoint(path: &Path, file: &CheckpointFile) -> Result<()> {
    let manifest = Manifest {
        magic: CHECKPOINT_MAGIC.into(),
        meta: file.meta.clone(),
        tensors: file
            .tensors
            .iter()
            .map(|t| Entry {
                path: t.path().to_string(),
                dtype: match t {
                    TensorBlob::F32 { .. } => "f32le".into(),
                    TensorBlob::F64 { .. } => "f64le".into(),
                },
                len: t.len(),
            })
            .collect(),
    };
    let mut buf = serde_json::to_vec(&manifest)?;
    buf.push(b'\n');
    for t in &file.tensors {
        match t {
            TensorBlob::F32 { data, .. } => data.iter().for_each(|v| buf.extend(v.to_le_bytes())),
            TensorBlob::F64 { data, .. } => data.iter().for_each(|v| buf.extend(v.to_le_bytes())),
        }
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<CheckpointFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::MalformedHeader("checkpoint manifest has no terminating newline".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::MalformedHeader(format!("checkpoint manifest: {e}")))?;
    if manifest.magic != CHECKPOINT_MAGIC {
        return Err(Error::MalformedHeader(format!("bad magic {:?}", manifest.magic)));
    }
    let mut expected = 0usize;
    for e in &manifest.tensors {
        expected += e.len
            * match e.dtype.as_str() {
                "f32le" => 4,
                "f64le" => 8,
                other => return Err(Error::MalformedHeader(format!("unknown dtype {other}"))),
            };
    }
    let payload = &bytes[nl + 1..];
    if payload.len() != expected {
        return Err(Error::Truncated {
            expected,
            found: payload.len(),
        });
    }
    let mut off = 0;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in manifest.tensors {
        if e.dtype == "f32le" {
            let data = payload[off..off + 4 * e.len]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            off += 4 * e.len;
            tensors.push(TensorBlob::F32 { path: e.path, data });
        } else {
            let data = payload[off..off + 8 * e.len]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            off += 8 * e.len;
            tensors.push(TensorBlob::F64 { path: e.path, data });
        }
    }
    Ok(CheckpointFile {
        meta: manifest.meta,
        tensors,
    })
}

/// Parameters as `f32` blobs keyed by path.
pub fn export_params<T: Real>(params: &impl ParamSet<T>, prefix: &str) -> Vec<TensorBlob> {
    params
        .tensors(prefix)
        .into_iter()
        .map(|(path, t)| TensorBlob::F32 {
            path,
            data: t.iter().map(|v| v.to_f32().unwrap()).collect(),
        })
        .collect()
}

/// Fill `params` from blobs by path. Every parameter tensor must be present
/// with a matching length; extra blobs are ignored.
pub fn import_params<T: Real>(params: &mut impl ParamSet<T>, prefix: &str, blobs: &[TensorBlob]) -> Result<()> {
    let by_path: HashMap<&str, &TensorBlob> = blobs.iter().map(|b| (b.path(), b)).collect();
    for (path, dst) in params.tensors_mut(prefix) {
        let blob = by_path
            .get(path.as_str())
            .ok_or_else(|| Error::Shape(format!("checkpoint lacks tensor {path}")))?;
        if blob.len() != dst.len() {
            return Err(Error::Shape(format!(
                "tensor {path}: checkpoint has {} values, model expects {}",
                blob.len(),
                dst.len()
            )));
        }
        match blob {
            TensorBlob::F32 { data, .. } => {
                for (d, &s) in dst.iter_mut().zip(data) {
                    *d = T::from_f32(s).unwrap();
                }
            }
            TensorBlob::F64 { data, .. } => {
                for (d, &s) in dst.iter_mut().zip(data) {
                    *d = T::from_f64(s).unwrap();
                }
            }
        }
    }
    Ok(())
}
