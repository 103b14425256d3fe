//! Sliding-window framing of 30 s epochs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameConfig {
    /// Frame length in samples.
    pub frame_len: usize,
    /// Hop between consecutive frame starts, in samples.
    pub step: usize,
}

impl Default for FrameConfig {
    fn default() -> Self {
        Self {
            frame_len: 300,
            step: 75,
        }
    }
}

impl FrameConfig {
    /// Converts a (size, step) pair in seconds to whole samples, truncating
    /// fractional sample counts (0.375 s at 100 Hz becomes 37).
    pub fn from_seconds(size_sec: f64, step_sec: f64, rate: f64) -> Self {
        Self {
            frame_len: (size_sec * rate + 1e-9).floor() as usize,
            step: (step_sec * rate + 1e-9).floor() as usize,
        }
    }

    pub fn validate(&self, epoch_len: usize) -> Result<()> {
        if self.step == 0 || self.frame_len == 0 {
            return Err(Error::Config("frame_len and step must be positive".into()));
        }
        if self.step > self.frame_len {
            return Err(Error::Config(format!("step {} exceeds frame_len {}", self.step, self.frame_len)));
        }
        if self.frame_len > epoch_len {
            return Err(Error::Config(format!(
                "frame_len {} exceeds epoch length {epoch_len}",
                self.frame_len
            )));
        }
        Ok(())
    }

    pub fn num_frames(&self, epoch_len: usize) -> usize {
        (epoch_len - self.frame_len) / self.step + 1
    }
}

/// The frames of one epoch as an `[M, frame_len]` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    pub frames: Tensor,
    pub epoch_index: usize,
}

impl FrameSequence {
    pub fn num_frames(&self) -> usize {
        self.frames.dim(0)
    }
}

pub fn frame_epoch(epoch: &[f64], cfg: FrameConfig) -> Result<FrameSequence> {
    frame_epoch_at(epoch, cfg, 0)
}

pub fn frame_epoch_at(epoch: &[f64], cfg: FrameConfig, epoch_index: usize) -> Result<FrameSequence> {
    cfg.validate(epoch.len())?;
    let m = cfg.num_frames(epoch.len());
    let mut data = Vec::with_capacity(m * cfg.frame_len);
    for i in 0..m {
        data.extend_from_slice(&epoch[i * cfg.step..i * cfg.step + cfg.frame_len]);
    }
    Ok(FrameSequence {
        frames: Tensor::new(&[m, cfg.frame_len], data),
        epoch_index,
    })
}

/// Frames of several equal-length epochs stacked as `[N * M, 1, frame_len]`,
/// the layout the frame network consumes.
pub fn frame_batch(epochs: &[&[f64]], cfg: FrameConfig) -> Result<(Tensor, usize)> {
    let first = epochs.first().ok_or_else(|| Error::Config("empty epoch batch".into()))?;
    cfg.validate(first.len())?;
    let m = cfg.num_frames(first.len());
    let mut data = Vec::with_capacity(epochs.len() * m * cfg.frame_len);
    for e in epochs {
        if e.len() != first.len() {
            return Err(Error::Shape(format!("epoch of {} samples in a batch of {}", e.len(), first.len())));
        }
        for i in 0..m {
            data.extend_from_slice(&e[i * cfg.step..i * cfg.step + cfg.frame_len]);
        }
    }
    Ok((Tensor::new(&[epochs.len() * m, 1, cfg.frame_len], data), m))
}

/// Integer-sample versions of the twelve (size, step) frame settings
/// evaluated in the frame-design ablation, at 100 Hz.
pub fn ablation_settings() -> Vec<(f64, f64, FrameConfig)> {
    let rows = [
        (3.0, 0.375),
        (3.0, 0.75),
        (3.0, 1.5),
        (4.0, 0.5),
        (4.0, 1.0),
        (4.0, 2.0),
        (5.0, 0.625),
        (5.0, 1.25),
        (5.0, 2.5),
        (6.0, 0.75),
        (6.0, 1.5),
        (6.0, 3.0),
    ];
    rows.iter()
        .map(|&(s, t)| (s, t, FrameConfig::from_seconds(s, t, 100.0)))
        .collect()
}
