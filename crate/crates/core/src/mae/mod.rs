//! Masking, the Transformer encoder, the light decoder, and the
//! masked-only reconstruction loss.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, ParamId, ParamKind, ParamStore, TransformerBlock};
use crate::tensor::Tensor;

/// A random split of frame indices into kept and masked sets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub num_frames: usize,
    pub kept: Vec<usize>,
    pub masked: Vec<usize>,
    /// Key of the generator stream the plan was drawn from.
    pub seed: u64,
}

impl MaskPlan {
    /// Keeps every frame (inference path).
    pub fn full(num_frames: usize) -> Self {
        Self {
            num_frames,
            kept: (0..num_frames).collect(),
            masked: Vec::new(),
            seed: 0,
        }
    }

    pub fn from_kept(num_frames: usize, mut kept: Vec<usize>) -> Result<Self> {
        kept.sort_unstable();
        kept.dedup();
        if kept.is_empty() || kept.last().is_some_and(|&k| k >= num_frames) {
            return Err(Error::Config(format!("invalid kept set for {num_frames} frames")));
        }
        let masked = (0..num_frames).filter(|i| kept.binary_search(i).is_err()).collect();
        Ok(Self {
            num_frames,
            kept,
            masked,
            seed: 0,
        })
    }

    pub fn num_kept(&self) -> usize {
        self.kept.len()
    }
}

/// Number of kept frames for `m` frames at `mask_ratio`.
pub fn kept_count(m: usize, mask_ratio: f64) -> usize {
    (((1.0 - mask_ratio) * m as f64).round() as usize).clamp(1, m - 1)
}

/// Draws a plan with `max(1, round((1 - ratio) * M))` kept frames chosen
/// uniformly without replacement.
pub fn sample_mask(m: usize, mask_ratio: f64, rng: &mut impl Rng, seed: u64) -> Result<MaskPlan> {
    if m < 2 {
        return Err(Error::Config(format!("masking needs at least 2 frames, got {m}")));
    }
    if !(mask_ratio > 0.0 && mask_ratio < 1.0) {
        return Err(Error::Config(format!("mask ratio {mask_ratio} outside (0, 1)")));
    }
    let k = kept_count(m, mask_ratio);
    let mut plan = MaskPlan::from_kept(m, sample(rng, m, k).into_vec())?;
    plan.seed = seed;
    Ok(plan)
}

/// Fixed sinusoidal codes for the given positions, `[positions.len(), dim]`.
pub fn sinusoidal(positions: &[usize], dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(positions.len() * dim);
    for &p in positions {
        for j in 0..dim {
            let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / dim as f64);
            let angle = p as f64 * freq;
            data.push(if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(&[positions.len(), dim], data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
}

fn check_heads(dim: usize, heads: usize, what: &str) -> Result<()> {
    if heads == 0 || dim % heads != 0 {
        return Err(Error::Config(format!("{what} dim {dim} not divisible by {heads} heads")));
    }
    Ok(())
}

const MLP_RATIO: usize = 4;

fn same_kept_count(plans: &[MaskPlan]) -> Result<usize> {
    let k = plans.first().ok_or_else(|| Error::Config("no mask plans".into()))?.num_kept();
    if plans.iter().any(|p| p.num_kept() != k) {
        return Err(Error::Shape("mask plans in a batch keep different frame counts".into()));
    }
    Ok(k)
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub proj: Linear,
    pub cls: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub norm: Option<LayerNorm>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, prefix: &str, embed_dim: usize, cfg: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        check_heads(cfg.dim, cfg.heads, "encoder")?;
        let proj = Linear::new(store, &format!("{prefix}.proj"), embed_dim, cfg.dim, true, rng);
        let cls = store.add_normal(format!("{prefix}.cls_token"), &[cfg.dim], 0.02, ParamKind::NoDecay, rng);
        let blocks = (0..cfg.depth)
            .map(|i| TransformerBlock::new(store, &format!("{prefix}.block{i}"), cfg.dim, cfg.heads, MLP_RATIO, rng))
            .collect();
        let norm = (cfg.depth > 0).then(|| LayerNorm::new(store, &format!("{prefix}.norm"), cfg.dim));
        Ok(Self {
            cfg,
            proj,
            cls,
            blocks,
            norm,
        })
    }

    /// Class token followed by projected kept frames plus their positional
    /// codes: `[B, K + 1, dim]`, before any Transformer block.
    pub fn embed_tokens(&self, g: &mut Graph, z: Var, plans: &[MaskPlan]) -> Result<Var> {
        let shape = g.shape(z).to_vec();
        if shape.len() != 3 || shape[0] != plans.len() {
            return Err(Error::Shape(format!("encoder input {shape:?} for {} plans", plans.len())));
        }
        let (b, m, _) = (shape[0], shape[1], shape[2]);
        let k = same_kept_count(plans)?;
        if plans.iter().any(|p| p.num_frames != m) {
            return Err(Error::Shape(format!("mask plans do not cover {m} frames")));
        }
        let index: Vec<usize> = plans.iter().flat_map(|p| p.kept.iter().copied()).collect();
        let kept = g.gather_rows(z, &index, k);
        let x = self.proj.forward(g, kept);
        let mut pos = Vec::with_capacity(b * k * self.cfg.dim);
        for p in plans {
            pos.extend_from_slice(sinusoidal(&p.kept, self.cfg.dim).data());
        }
        let x = g.add_const(x, &Tensor::new(&[b, k, self.cfg.dim], pos));
        let cls = g.param(self.cls);
        let cls = g.reshape(cls, &[1, self.cfg.dim]);
        let cls = g.expand_leading(cls, b);
        Ok(g.concat(&[cls, x], 1))
    }

    /// Runs blocks `from..` plus the final norm.
    pub fn run_blocks(&self, g: &mut Graph, mut x: Var, from: usize) -> Result<Var> {
        for blk in &self.blocks[from..] {
            x = blk.forward(g, x, None);
        }
        if let Some(n) = &self.norm {
            x = n.forward(g, x);
        }
        if !g.value(x).all_finite() {
            return Err(Error::Numerical {
                layer: "encoder".into(),
            });
        }
        Ok(x)
    }

    /// `z: [B, M, E]` to latent tokens `[B, K + 1, dim]`; row 0 is the class token.
    pub fn forward(&self, g: &mut Graph, z: Var, plans: &[MaskPlan]) -> Result<Var> {
        let x = self.embed_tokens(g, z, plans)?;
        self.run_blocks(g, x, 0)
    }

    /// Parameter name prefix of block `i`.
    pub fn block_prefix(&self, i: usize) -> &str {
        &self.blocks[i].prefix
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub proj: Linear,
    pub mask_token: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub norm: Option<LayerNorm>,
    pub head: Linear,
}

impl Decoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        encoder_dim: usize,
        embed_dim: usize,
        cfg: DecoderConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        check_heads(cfg.dim, cfg.heads, "decoder")?;
        let proj = Linear::new(store, &format!("{prefix}.proj"), encoder_dim, cfg.dim, true, rng);
        let mask_token = store.add_normal(format!("{prefix}.mask_token"), &[cfg.dim], 0.02, ParamKind::NoDecay, rng);
        let blocks = (0..cfg.depth)
            .map(|i| TransformerBlock::new(store, &format!("{prefix}.block{i}"), cfg.dim, cfg.heads, MLP_RATIO, rng))
            .collect();
        let norm = (cfg.depth > 0).then(|| LayerNorm::new(store, &format!("{prefix}.norm"), cfg.dim));
        let head = Linear::new(store, &format!("{prefix}.head"), cfg.dim, embed_dim, true, rng);
        Ok(Self {
            cfg,
            proj,
            mask_token,
            blocks,
            norm,
            head,
        })
    }

    /// Source row (in the `[kept ++ masked]` concatenation) for every
    /// original frame position.
    pub fn slot_sources(plan: &MaskPlan) -> Vec<usize> {
        let mut src = vec![0; plan.num_frames];
        for (j, &p) in plan.kept.iter().enumerate() {
            src[p] = j;
        }
        for (j, &p) in plan.masked.iter().enumerate() {
            src[p] = plan.kept.len() + j;
        }
        src
    }

    /// Full-length sequence with latents in kept slots and the mask token
    /// elsewhere, plus positional codes: `[B, M, dim]`.
    pub fn assemble(&self, g: &mut Graph, h: Var, plans: &[MaskPlan]) -> Result<Var> {
        let shape = g.shape(h).to_vec();
        let k = same_kept_count(plans)?;
        if shape.len() != 3 || shape[0] != plans.len() || shape[1] != k {
            return Err(Error::Shape(format!(
                "decoder got latents {shape:?} for {} plans keeping {k}",
                plans.len()
            )));
        }
        let b = shape[0];
        let m = plans[0].num_frames;
        if plans.iter().any(|p| p.num_frames != m) {
            return Err(Error::Shape("mask plans differ in frame count".into()));
        }
        let x = self.proj.forward(g, h);
        let x = if m > k {
            let tok = g.param(self.mask_token);
            let tok = g.expand_leading(tok, m - k);
            let tok = g.expand_leading(tok, b);
            g.concat(&[x, tok], 1)
        } else {
            x
        };
        let index: Vec<usize> = plans.iter().flat_map(Self::slot_sources).collect();
        let x = g.gather_rows(x, &index, m);
        let positions: Vec<usize> = (0..m).collect();
        Ok(g.add_const(x, &sinusoidal(&positions, self.cfg.dim)))
    }

    /// `h: [B, K, encoder_dim]` (class token removed) to reconstructions `[B, M, embed_dim]`.
    pub fn forward(&self, g: &mut Graph, h: Var, plans: &[MaskPlan]) -> Result<Var> {
        let mut x = self.assemble(g, h, plans)?;
        for blk in &self.blocks {
            x = blk.forward(g, x, None);
        }
        if let Some(n) = &self.norm {
            x = n.forward(g, x);
        }
        let r = self.head.forward(g, x);
        if !g.value(r).all_finite() {
            return Err(Error::Numerical {
                layer: "decoder".into(),
            });
        }
        Ok(r)
    }
}

/// Mean squared error over masked positions only, averaged over batch,
/// masked count and embedding width. `z` is cut from the tape when
/// `stopgrad_targets` is set.
pub fn reconstruction_loss(g: &mut Graph, z: Var, r: Var, plans: &[MaskPlan], stopgrad_targets: bool) -> Result<Var> {
    if g.shape(z) != g.shape(r) {
        return Err(Error::Shape(format!("targets {:?} vs reconstructions {:?}", g.shape(z), g.shape(r))));
    }
    let n_masked = plans.first().map_or(0, |p| p.masked.len());
    if n_masked == 0 {
        return Err(Error::Config("reconstruction loss needs at least one masked frame".into()));
    }
    if plans.iter().any(|p| p.masked.len() != n_masked) {
        return Err(Error::Shape("mask plans in a batch mask different frame counts".into()));
    }
    let index: Vec<usize> = plans.iter().flat_map(|p| p.masked.iter().copied()).collect();
    let target = if stopgrad_targets { g.detach(z) } else { z };
    let zt = g.gather_rows(target, &index, n_masked);
    let rm = g.gather_rows(r, &index, n_masked);
    let diff = g.sub(rm, zt);
    let sq = g.mul(diff, diff);
    Ok(g.mean_all(sq))
}

#[cfg(test)]
mod tests;
