//! Named-tensor container: a raw little-endian `f64` blob plus a JSON
//! manifest mapping each tensor name to its shape and byte offset.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamKind, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TENSOR_FORMAT: &str = "neuronet-tensors/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorManifest {
    pub format: String,
    pub tensors: Vec<TensorEntry>,
}

/// Writes `path` (blob) and `path.json` (manifest).
pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let mut blob = Vec::new();
    let mut tensors = Vec::with_capacity(store.len());
    for id in store.ids() {
        let t = store.get(id);
        tensors.push(TensorEntry {
            name: store.name(id).to_owned(),
            kind: store.kind(id),
            shape: t.shape().to_vec(),
            dtype: "f64".into(),
            offset: blob.len() as u64,
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = TensorManifest {
        format: TENSOR_FORMAT.into(),
        tensors,
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, blob)?;
    fs::write(manifest_path(path), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    p.into()
}

/// Reads every tensor of a container.
pub fn read_tensors(path: &Path) -> Result<Vec<(TensorEntry, Tensor)>> {
    let manifest: TensorManifest = serde_json::from_slice(&fs::read(manifest_path(path))?)?;
    if manifest.format != TENSOR_FORMAT {
        return Err(Error::Config(format!("unsupported tensor format `{}`", manifest.format)));
    }
    let blob = fs::read(path)?;
    manifest
        .tensors
        .into_iter()
        .map(|e| {
            if e.dtype != "f64" {
                return Err(Error::Config(format!("unsupported dtype `{}`", e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 8 * n;
            let bytes = blob.get(start..end).ok_or(Error::Parse { offset: blob.len() })?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(&e.shape, data);
            Ok((e, t))
        })
        .collect()
}

/// Loads a container into an already-built store; names and shapes must match.
pub fn load_checkpoint(store: &mut ParamStore, path: &Path) -> Result<()> {
    let tensors = read_tensors(path)?;
    let mut seen = 0;
    for (entry, t) in tensors {
        let id = store
            .id(&entry.name)
            .ok_or_else(|| Error::Config(format!("checkpoint tensor `{}` not in model", entry.name)))?;
        if store.get(id).shape() != t.shape() {
            return Err(Error::Shape(format!(
                "`{}`: model {:?} vs checkpoint {:?}",
                entry.name,
                store.get(id).shape(),
                t.shape()
            )));
        }
        store.set(id, t);
        seen += 1;
    }
    if seen != store.len() {
        return Err(Error::Config(format!(
            "checkpoint has {seen} tensors, model expects {}",
            store.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let mut a = ParamStore::new();
        a.add("x.w", ParamKind::Weight, Tensor::new(&[2, 2], vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE]));
        a.add("x.b", ParamKind::NoDecay, Tensor::new(&[3], vec![0.1, 0.2, 0.3]));
        save_checkpoint(&a, &path).unwrap();
        let mut b = ParamStore::new();
        b.add("x.w", ParamKind::Weight, Tensor::zeros(&[2, 2]));
        b.add("x.b", ParamKind::NoDecay, Tensor::zeros(&[3]));
        load_checkpoint(&mut b, &path).unwrap();
        for id in a.ids() {
            assert_eq!(a.get(id), b.get(id));
        }
        let manifest: TensorManifest =
            serde_json::from_slice(&fs::read(dir.path().join("ckpt.bin.json")).unwrap()).unwrap();
        assert_eq!(manifest.tensors[1].offset, 32);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let mut a = ParamStore::new();
        a.add("w", ParamKind::Weight, Tensor::zeros(&[2]));
        save_checkpoint(&a, &path).unwrap();
        let mut b = ParamStore::new();
        b.add("w", ParamKind::Weight, Tensor::zeros(&[3]));
        assert!(matches!(load_checkpoint(&mut b, &path), Err(Error::Shape(_))));
    }
}
