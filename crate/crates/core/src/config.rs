//! Run configuration read from TOML.
//!
//! A file names a `preset`; every key it sets overrides that preset's value
//! and unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::contrastive::ProjectionConfig;
use crate::error::{Error, Result};
use crate::evaluation::{FinetuneConfig, ProbeConfig};
use crate::frame_network::FrameNetConfig;
use crate::framing::FrameConfig;
use crate::mae::{DecoderConfig, EncoderConfig};
use crate::neuronet::{NeuroNetConfig, Preset};
use crate::nn::AdamWConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Epoch cache directory; falls back to `NEURONET_CACHE`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    pub channel: String,
    pub folds: usize,
    pub val_subjects: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub temperature: f64,
    pub mask_ratio: f64,
    pub stopgrad_targets: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SslConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    /// Run folds one at a time so logs interleave reproducibly.
    pub deterministic: bool,
    pub data: DataConfig,
    pub frame: FrameConfig,
    pub frame_network: FrameNetConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub projection: ProjectionConfig,
    pub loss: LossConfig,
    pub ssl: SslConfig,
    pub probe: ProbeConfig,
    pub finetune: FinetuneConfig,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let m = NeuroNetConfig::preset(preset);
        let mut finetune = FinetuneConfig::default();
        finetune.tcm.d_model = m.encoder.dim;
        let mut probe = ProbeConfig::default();
        if preset == Preset::Desk {
            probe.lr = 1e-3;
            probe.epochs = 100;
            probe.batch_size = 256;
            finetune.epochs = 10;
            finetune.batch_size = 8;
            finetune.train_stride = Some(5);
            finetune.lr = 1e-3;
            finetune.tcm.num_blocks = 1;
            finetune.tcm.expand = 1;
        }
        Self {
            preset,
            seed: 0,
            deterministic: false,
            data: DataConfig {
                dir: None,
                channel: "EEG Fpz-Cz".into(),
                folds: 5,
                val_subjects: if preset == Preset::Desk { 2 } else { 15 },
            },
            frame: m.frame,
            frame_network: m.frame_net,
            encoder: m.encoder,
            decoder: m.decoder,
            projection: m.projection,
            loss: LossConfig {
                alpha: m.alpha,
                temperature: m.temperature,
                mask_ratio: m.mask_ratio,
                stopgrad_targets: m.stopgrad_targets,
            },
            ssl: SslConfig {
                epochs: m.epochs,
                batch_size: m.batch_size,
                lr: m.optimizer.lr,
                betas: m.optimizer.betas,
                eps: m.optimizer.eps,
                weight_decay: m.optimizer.weight_decay,
            },
            probe,
            finetune,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let preset = match user.get("preset") {
            None => Preset::B,
            Some(v) => v
                .clone()
                .try_into()
                .map_err(|e: toml::de::Error| Error::Config(format!("preset: {e}")))?,
        };
        let mut base = toml::Table::try_from(Self::preset(preset)).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, user);
        let cfg: Self = toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn model_config(&self) -> NeuroNetConfig {
        NeuroNetConfig {
            preset: self.preset,
            frame: self.frame,
            frame_net: self.frame_network.clone(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            projection: self.projection.clone(),
            mask_ratio: self.loss.mask_ratio,
            temperature: self.loss.temperature,
            alpha: self.loss.alpha,
            stopgrad_targets: self.loss.stopgrad_targets,
            optimizer: AdamWConfig {
                lr: self.ssl.lr,
                betas: self.ssl.betas,
                eps: self.ssl.eps,
                weight_decay: self.ssl.weight_decay,
            },
            epochs: self.ssl.epochs,
            batch_size: self.ssl.batch_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.finetune.tcm.validate()?;
        if self.ssl.batch_size < 2 {
            return Err(Error::Config("ssl.batch_size must be at least 2".into()));
        }
        if self.data.folds < 2 {
            return Err(Error::Config("data.folds must be at least 2".into()));
        }
        Ok(())
    }

    /// Cache directory from the config, else from `NEURONET_CACHE`.
    pub fn data_dir(&self) -> Option<PathBuf> {
        self.data
            .dir
            .clone()
            .or_else(|| std::env::var_os("NEURONET_CACHE").map(PathBuf::from))
    }
}

fn merge(base: &mut toml::Table, user: toml::Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => merge(b, u),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_b_defaults() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c.preset, Preset::B);
        assert_eq!((c.ssl.epochs, c.ssl.batch_size, c.ssl.lr), (50, 1024, 2e-5));
        assert_eq!(c.ssl.betas, (0.9, 0.999));
        assert_eq!((c.frame.frame_len, c.frame.step), (300, 75));
        assert_eq!((c.encoder.dim, c.encoder.depth, c.encoder.heads), (768, 4, 8));
        assert_eq!((c.decoder.dim, c.decoder.depth, c.decoder.heads), (256, 3, 8));
        assert_eq!((c.projection.hidden, c.projection.out), (1024, 512));
        assert_eq!(c.loss.temperature, 0.5);
        assert_eq!((c.probe.epochs, c.probe.batch_size, c.probe.lr), (300, 512, 1e-5));
        assert_eq!((c.finetune.epochs, c.finetune.batch_size, c.finetune.lr), (100, 128, 5e-3));
        let t = &c.finetune.tcm;
        assert_eq!((t.context_length, t.d_state, t.d_conv, t.expand), (20, 16, 4, 2));
        assert_eq!(c.data.val_subjects, 15);
    }

    #[test]
    fn preset_t_and_overrides() {
        let c = RunConfig::from_toml("preset = \"T\"\nseed = 9\n[loss]\nalpha = 0.5\n[frame]\nstep = 150\n").unwrap();
        assert_eq!((c.encoder.dim, c.decoder.dim, c.decoder.depth), (512, 192, 1));
        assert_eq!((c.seed, c.loss.alpha, c.frame.step, c.frame.frame_len), (9, 0.5, 150, 300));
        assert_eq!(c.finetune.tcm.d_model, 512);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(matches!(RunConfig::from_toml("colour = 1"), Err(Error::Config(_))));
        assert!(RunConfig::from_toml("[loss]\nbeta = 1").is_err());
        assert!(RunConfig::from_toml("[finetune.tcm]\nwidth = 3").is_err());
        assert!(RunConfig::from_toml("[encoder]\ndim = 512").is_err());
        assert!(RunConfig::from_toml("[loss]\nalpha = -1.0").is_err());
    }

    #[test]
    fn toml_round_trip() {
        for p in [Preset::T, Preset::B, Preset::Desk] {
            let c = RunConfig::preset(p);
            let text = c.to_toml().unwrap();
            assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
        }
    }
}
