//! The full self-supervised model: frame network, two masked paths through
//! one encoder/decoder, projection head, and the combined objective.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::contrastive::{nt_xent, ProjectionConfig, ProjectionHead};
use crate::error::{Error, Result};
use crate::frame_network::{FrameNetConfig, FrameNetwork};
use crate::framing::{frame_batch, FrameConfig};
use crate::mae::{reconstruction_loss, sample_mask, Decoder, DecoderConfig, Encoder, EncoderConfig, MaskPlan};
use crate::nn::{load_checkpoint, save_checkpoint, AdamW, AdamWConfig, ParamStore};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    /// Smaller standard configuration.
    T,
    /// Larger standard configuration.
    B,
    /// Reduced widths for laptop-scale runs and CI.
    Desk,
    /// No width constraints; starts from `B`. Used by ablations that move
    /// a standard dimension.
    Custom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeuroNetConfig {
    pub preset: Preset,
    pub frame: FrameConfig,
    pub frame_net: FrameNetConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub projection: ProjectionConfig,
    pub mask_ratio: f64,
    pub temperature: f64,
    pub alpha: f64,
    pub stopgrad_targets: bool,
    pub optimizer: AdamWConfig,
    pub epochs: usize,
    pub batch_size: usize,
}

impl NeuroNetConfig {
    pub fn preset(preset: Preset) -> Self {
        let (enc, dec) = match preset {
            Preset::T => ((512, 4), (192, 1)),
            Preset::B | Preset::Desk | Preset::Custom => ((768, 4), (256, 3)),
        };
        let mut cfg = Self {
            preset,
            frame: FrameConfig::default(),
            frame_net: FrameNetConfig {
                embed_dim: enc.0,
                ..FrameNetConfig::default()
            },
            encoder: EncoderConfig {
                dim: enc.0,
                depth: enc.1,
                heads: 8,
            },
            decoder: DecoderConfig {
                dim: dec.0,
                depth: dec.1,
                heads: 8,
            },
            projection: ProjectionConfig::default(),
            mask_ratio: 0.75,
            temperature: 0.5,
            alpha: 1.0,
            stopgrad_targets: true,
            optimizer: AdamWConfig {
                lr: 2e-5,
                ..AdamWConfig::default()
            },
            epochs: 50,
            batch_size: 1024,
        };
        if preset == Preset::Desk {
            cfg.encoder.dim /= 8;
            cfg.decoder.dim /= 8;
            cfg.frame_net.embed_dim = cfg.encoder.dim;
            cfg.frame_net.stem_channels = 8;
            cfg.frame_net.branch_channels = 8;
            cfg.projection = ProjectionConfig { hidden: 128, out: 64 };
            cfg.optimizer.lr = 1e-3;
            cfg.epochs = 5;
            cfg.batch_size = 64;
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let want = match self.preset {
            Preset::T => Some(((512, 4), (192, 1))),
            Preset::B => Some(((768, 4), (256, 3))),
            Preset::Desk | Preset::Custom => None,
        };
        if let Some((enc, dec)) = want {
            if (self.encoder.dim, self.encoder.depth) != enc || (self.decoder.dim, self.decoder.depth) != dec {
                return Err(Error::Config(format!(
                    "preset {:?} requires encoder {}/{} and decoder {}/{}",
                    self.preset, enc.0, enc.1, dec.0, dec.1
                )));
            }
        }
        if self.frame_net.embed_dim != self.encoder.dim {
            return Err(Error::Config(format!(
                "frame embedding width {} must equal encoder width {}",
                self.frame_net.embed_dim, self.encoder.dim
            )));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha {} must be non-negative", self.alpha)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config(format!("mask ratio {} outside (0, 1)", self.mask_ratio)));
        }
        self.frame_net.validate()?;
        self.frame.validate(crate::signal_io::EPOCH_LEN)
    }

    pub fn num_frames(&self) -> usize {
        self.frame.num_frames(crate::signal_io::EPOCH_LEN)
    }
}

/// Scalar losses of one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_rec1: f64,
    pub l_rec2: f64,
    pub l_contra: f64,
    pub l_total: f64,
}

/// Loss nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct SslVars {
    pub l_rec1: Var,
    pub l_rec2: Var,
    pub l_contra: Var,
    pub l_total: Var,
}

impl SslVars {
    pub fn values(&self, g: &Graph) -> LossBundle {
        LossBundle {
            l_rec1: g.value(self.l_rec1).item(),
            l_rec2: g.value(self.l_rec2).item(),
            l_contra: g.value(self.l_contra).item(),
            l_total: g.value(self.l_total).item(),
        }
    }
}

/// `0.5 (l_rec1 + l_rec2) + alpha * l_contra`.
pub fn combine_losses(g: &mut Graph, l_rec1: Var, l_rec2: Var, l_contra: Var, alpha: f64) -> Var {
    let rec = g.add(l_rec1, l_rec2);
    let rec = g.scale(rec, 0.5);
    let con = g.scale(l_contra, alpha);
    g.add(rec, con)
}

#[derive(Clone, Debug)]
pub struct NeuroNet {
    pub cfg: NeuroNetConfig,
    pub store: ParamStore,
    pub frame_net: FrameNetwork,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub projection: ProjectionHead,
}

const EMBED_CHUNK: usize = 16;

impl NeuroNet {
    pub fn new(cfg: NeuroNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, &[rng::hash_str("init")]);
        let frame_net = FrameNetwork::new(&mut store, "frame_net", cfg.frame_net.clone(), &mut r)?;
        let e = cfg.frame_net.embed_dim;
        let encoder = Encoder::new(&mut store, "encoder", e, cfg.encoder.clone(), &mut r)?;
        let decoder = Decoder::new(&mut store, "decoder", cfg.encoder.dim, e, cfg.decoder.clone(), &mut r)?;
        let projection = ProjectionHead::new(&mut store, "projection", cfg.encoder.dim, &cfg.projection, &mut r);
        Ok(Self {
            cfg,
            store,
            frame_net,
            encoder,
            decoder,
            projection,
        })
    }

    /// Frame embeddings `z: [N, M, E]` for a batch of epochs.
    pub fn frame_embeddings(&self, g: &mut Graph, epochs: &[&[f64]], training: bool) -> Result<Var> {
        let (frames, m) = frame_batch(epochs, self.cfg.frame)?;
        let x = g.input(frames);
        let z = self.frame_net.forward(g, x, training)?;
        Ok(g.reshape(z, &[epochs.len(), m, self.cfg.frame_net.embed_dim]))
    }

    /// Everything downstream of the two encoder outputs: the class tokens go
    /// to the projection head and NT-Xent, the remaining tokens to the decoder.
    pub fn heads_from_latents(
        &self,
        g: &mut Graph,
        z: Var,
        h1: Var,
        h2: Var,
        plans1: &[MaskPlan],
        plans2: &[MaskPlan],
    ) -> Result<SslVars> {
        let n = plans1.len();
        let d = self.cfg.encoder.dim;
        let mut rec = Vec::with_capacity(2);
        let mut cls = Vec::with_capacity(2);
        for (h, plans) in [(h1, plans1), (h2, plans2)] {
            let k = plans[0].num_kept();
            let latents = g.narrow(h, 1, 1, k);
            let r = self.decoder.forward(g, latents, plans)?;
            rec.push(reconstruction_loss(g, z, r, plans, self.cfg.stopgrad_targets)?);
            let c = g.narrow(h, 1, 0, 1);
            let c = g.reshape(c, &[n, d]);
            cls.push(self.projection.forward(g, c)?);
        }
        let l_contra = nt_xent(g, cls[0], cls[1], self.cfg.temperature)?;
        let l_total = combine_losses(g, rec[0], rec[1], l_contra, self.cfg.alpha);
        Ok(SslVars {
            l_rec1: rec[0],
            l_rec2: rec[1],
            l_contra,
            l_total,
        })
    }

    /// Forward pass of the self-supervised objective.
    pub fn ssl_forward(
        &self,
        g: &mut Graph,
        epochs: &[&[f64]],
        plans1: &[MaskPlan],
        plans2: &[MaskPlan],
    ) -> Result<SslVars> {
        if epochs.len() < 2 {
            return Err(Error::Config("a self-supervised step needs at least 2 epochs".into()));
        }
        if plans1.len() != epochs.len() || plans2.len() != epochs.len() {
            return Err(Error::Shape("one mask plan per epoch and path required".into()));
        }
        let z = self.frame_embeddings(g, epochs, true)?;
        let h1 = self.encoder.forward(g, z, plans1)?;
        let h2 = self.encoder.forward(g, z, plans2)?;
        self.heads_from_latents(g, z, h1, h2, plans1, plans2)
    }

    /// One optimisation step; returns the losses measured before the update.
    pub fn ssl_step(
        &mut self,
        opt: &mut AdamW,
        epochs: &[&[f64]],
        plans1: &[MaskPlan],
        plans2: &[MaskPlan],
    ) -> Result<LossBundle> {
        let (losses, grads, buffers) = {
            let mut g = Graph::with_params(&self.store);
            let vars = self.ssl_forward(&mut g, epochs, plans1, plans2)?;
            let losses = vars.values(&g);
            if ![losses.l_rec1, losses.l_rec2, losses.l_contra, losses.l_total]
                .iter()
                .all(|v| v.is_finite())
            {
                return Err(Error::Numerical { layer: "loss".into() });
            }
            let grads = g.backward(vars.l_total).into_params();
            (losses, grads, g.take_buffer_updates())
        };
        opt.step(&mut self.store, &grads);
        for (id, v) in buffers {
            self.store.set(id, v);
        }
        Ok(losses)
    }

    /// Class-token embeddings `[N, encoder_dim]` with every frame visible
    /// and batch norm in inference mode.
    pub fn embed_epochs(&self, epochs: &[&[f64]]) -> Result<Tensor> {
        let d = self.cfg.encoder.dim;
        let mut out = Vec::with_capacity(epochs.len() * d);
        for chunk in epochs.chunks(EMBED_CHUNK) {
            let mut g = Graph::with_params(&self.store);
            g.freeze(self.store.ids());
            let z = self.frame_embeddings(&mut g, chunk, false)?;
            let plans = vec![MaskPlan::full(self.cfg.num_frames()); chunk.len()];
            let h = self.encoder.forward(&mut g, z, &plans)?;
            let c = g.narrow(h, 1, 0, 1);
            out.extend_from_slice(g.value(c).data());
        }
        Ok(Tensor::new(&[epochs.len(), d], out))
    }

    pub fn embed_epoch(&self, epoch: &[f64]) -> Result<Vec<f64>> {
        Ok(self.embed_epochs(&[epoch])?.into_data())
    }

    /// Full-sequence encoder tokens entering block `block` (all frames
    /// visible, inference mode): `[N, M + 1, encoder_dim]`.
    pub fn tokens_before_block(&self, epochs: &[&[f64]], block: usize) -> Result<Tensor> {
        let d = self.cfg.encoder.dim;
        let m = self.cfg.num_frames();
        let mut out = Vec::with_capacity(epochs.len() * (m + 1) * d);
        for chunk in epochs.chunks(EMBED_CHUNK) {
            let mut g = Graph::with_params(&self.store);
            g.freeze(self.store.ids());
            let z = self.frame_embeddings(&mut g, chunk, false)?;
            let plans = vec![MaskPlan::full(m); chunk.len()];
            let mut x = self.encoder.embed_tokens(&mut g, z, &plans)?;
            for blk in &self.encoder.blocks[..block] {
                x = blk.forward(&mut g, x, None);
            }
            out.extend_from_slice(g.value(x).data());
        }
        Ok(Tensor::new(&[epochs.len(), m + 1, d], out))
    }

    /// Writes `model.bin`, `model.bin.json` and `model_config.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        save_checkpoint(&self.store, &dir.join("model.bin"))?;
        fs::write(dir.join("model_config.json"), serde_json::to_string_pretty(&self.cfg)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg: NeuroNetConfig = serde_json::from_str(&fs::read_to_string(dir.join("model_config.json"))?)?;
        let mut model = Self::new(cfg, 0)?;
        load_checkpoint(&mut model.store, &dir.join("model.bin"))?;
        Ok(model)
    }
}

const MASK_STREAM: u64 = 0x6d61_736b;
const SHUFFLE_STREAM: u64 = 0x7368_7566;

/// Two independent mask plans per sample, keyed by `(seed, round, sample, path)`
/// so they do not depend on batch composition or worker scheduling.
pub fn draw_plans(
    seed: u64,
    round: u64,
    sample_ids: &[u64],
    m: usize,
    mask_ratio: f64,
) -> Result<(Vec<MaskPlan>, Vec<MaskPlan>)> {
    let mut paths = [Vec::with_capacity(sample_ids.len()), Vec::with_capacity(sample_ids.len())];
    for &id in sample_ids {
        for (path, plans) in paths.iter_mut().enumerate() {
            let key = rng::derive_key(seed, &[MASK_STREAM, round, id, path as u64]);
            let mut r = rng::stream(key, &[]);
            plans.push(sample_mask(m, mask_ratio, &mut r, key)?);
        }
    }
    let [a, b] = paths;
    Ok((a, b))
}

/// One JSON-lines record of the pretraining log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: usize,
    pub l_rec1: f64,
    pub l_rec2: f64,
    pub l_contra: f64,
    pub l_total: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Copy, Debug)]
pub struct PretrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop after this many optimiser steps.
    pub max_steps: Option<u64>,
}

/// Self-supervised training over `data`; `on_step` sees every log record.
pub fn pretrain(
    model: &mut NeuroNet,
    data: &[&[f64]],
    opts: PretrainOptions,
    mut on_step: impl FnMut(&LogRecord) -> Result<()>,
) -> Result<Vec<LogRecord>> {
    use rand::seq::SliceRandom;
    if opts.batch_size < 2 {
        return Err(Error::Config("batch size must be at least 2".into()));
    }
    let mut opt = AdamW::new(model.cfg.optimizer);
    let m = model.cfg.num_frames();
    let start = Instant::now();
    let mut log = Vec::new();
    let mut step = 0u64;
    for epoch in 0..opts.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng::stream(opts.seed, &[SHUFFLE_STREAM, epoch as u64]));
        for batch in order.chunks(opts.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            if opts.max_steps.is_some_and(|s| step >= s) {
                return Ok(log);
            }
            let epochs: Vec<&[f64]> = batch.iter().map(|&i| data[i]).collect();
            let ids: Vec<u64> = batch.iter().map(|&i| i as u64).collect();
            let (p1, p2) = draw_plans(opts.seed, epoch as u64, &ids, m, model.cfg.mask_ratio)?;
            let l = model.ssl_step(&mut opt, &epochs, &p1, &p2)?;
            step += 1;
            let rec = LogRecord {
                step,
                epoch,
                l_rec1: l.l_rec1,
                l_rec2: l.l_rec2,
                l_contra: l.l_contra,
                l_total: l.l_total,
                lr: opt.cfg.lr,
                wall_ms: start.elapsed().as_millis() as u64,
            };
            on_step(&rec)?;
            log.push(rec);
        }
    }
    Ok(log)
}
