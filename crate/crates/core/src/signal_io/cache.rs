//! On-disk epoch cache: `<subject>.bin` (row-major f32 epochs followed by
//! one label byte per epoch) plus a `<subject>.json` sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Provenance, StageLabel, StagedRecording};
use crate::error::{Error, Result};

pub const CACHE_FORMAT: &str = "neuronet-epochs/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheMeta {
    pub format: String,
    pub subject_id: String,
    pub sample_rate: f64,
    pub num_epochs: usize,
    pub epoch_len: usize,
    pub provenance: Provenance,
}

fn paths(dir: &Path, subject: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{subject}.bin")), dir.join(format!("{subject}.json")))
}

pub fn write_cache(dir: &Path, rec: &StagedRecording, provenance: &Provenance) -> Result<PathBuf> {
    rec.validate()?;
    fs::create_dir_all(dir)?;
    let epoch_len = rec.epochs.first().map_or(0, Vec::len);
    let mut bytes = Vec::with_capacity(rec.len() * (epoch_len * 4 + 1));
    for e in &rec.epochs {
        for &v in e {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    bytes.extend(rec.labels.iter().map(|l| l.index() as u8));
    let (bin, json) = paths(dir, &rec.subject_id);
    fs::write(&bin, bytes)?;
    let meta = CacheMeta {
        format: CACHE_FORMAT.into(),
        subject_id: rec.subject_id.clone(),
        sample_rate: rec.sample_rate,
        num_epochs: rec.len(),
        epoch_len,
        provenance: provenance.clone(),
    };
    fs::write(json, serde_json::to_string_pretty(&meta)?)?;
    Ok(bin)
}

pub fn read_cache(dir: &Path, subject: &str) -> Result<(StagedRecording, CacheMeta)> {
    let (bin, json) = paths(dir, subject);
    let meta: CacheMeta = serde_json::from_str(&fs::read_to_string(json)?)?;
    if meta.format != CACHE_FORMAT {
        return Err(Error::Config(format!("unsupported cache format `{}`", meta.format)));
    }
    let bytes = fs::read(bin)?;
    let body = meta.num_epochs * meta.epoch_len * 4;
    if bytes.len() != body + meta.num_epochs {
        return Err(Error::Parse {
            offset: bytes.len().min(body + meta.num_epochs),
        });
    }
    let epochs = bytes[..body]
        .chunks_exact(meta.epoch_len * 4)
        .map(|row| {
            row.chunks_exact(4)
                .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
                .collect()
        })
        .collect();
    let labels = bytes[body..]
        .iter()
        .enumerate()
        .map(|(i, &b)| StageLabel::from_index(b as usize).ok_or(Error::Parse { offset: body + i }))
        .collect::<Result<_>>()?;
    let rec = StagedRecording {
        subject_id: meta.subject_id.clone(),
        sample_rate: meta.sample_rate,
        epochs,
        labels,
    };
    Ok((rec, meta))
}

/// Subject ids with a sidecar in `dir`, sorted.
pub fn list_cached(dir: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "json") && path.with_extension("bin").exists() {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push(stem.to_string());
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Reads every cached recording in `dir`.
pub fn read_all(dir: &Path) -> Result<Vec<StagedRecording>> {
    list_cached(dir)?
        .iter()
        .map(|s| read_cache(dir, s).map(|(r, _)| r))
        .collect()
}
