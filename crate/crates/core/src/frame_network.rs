//! Multiscale 1-d residual CNN mapping each frame to an embedding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm1d, Conv1d, Linear, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrameNetConfig {
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub stem_channels: usize,
    pub pool: usize,
    pub branch_kernels: [usize; 3],
    pub blocks_per_branch: usize,
    pub branch_channels: usize,
    /// Width of the first fully connected layer; `None` means `2 * embed_dim`.
    pub fc_hidden: Option<usize>,
    pub embed_dim: usize,
}

impl Default for FrameNetConfig {
    fn default() -> Self {
        Self {
            stem_kernel: 7,
            stem_stride: 2,
            stem_channels: 64,
            pool: 2,
            branch_kernels: [3, 5, 7],
            blocks_per_branch: 3,
            branch_channels: 64,
            fc_hidden: None,
            embed_dim: 768,
        }
    }
}

impl FrameNetConfig {
    pub fn validate(&self) -> Result<()> {
        let [a, b, c] = self.branch_kernels;
        if a == b || b == c || a == c {
            return Err(Error::Config("branch kernel sizes must be distinct".into()));
        }
        if self.branch_kernels.iter().any(|k| k % 2 == 0) {
            return Err(Error::Config("branch kernels must be odd for same padding".into()));
        }
        if self.stem_stride == 0 || self.pool == 0 || self.embed_dim == 0 || self.blocks_per_branch == 0 {
            return Err(Error::Config("frame network sizes must be positive".into()));
        }
        Ok(())
    }

    /// Time length after the shared stem for a frame of `frame_len` samples.
    pub fn stem_output_len(&self, frame_len: usize) -> usize {
        let pad = self.stem_kernel / 2;
        let conv = (frame_len + 2 * pad).saturating_sub(self.stem_kernel) / self.stem_stride + 1;
        conv / self.pool
    }

    pub fn hidden(&self) -> usize {
        self.fc_hidden.unwrap_or(2 * self.embed_dim)
    }
}

#[derive(Clone, Debug)]
struct ConvBlock {
    conv: Conv1d,
    bn: BatchNorm1d,
}

#[derive(Clone, Debug)]
struct Branch {
    skip: Option<Conv1d>,
    blocks: Vec<ConvBlock>,
}

#[derive(Clone, Debug)]
pub struct FrameNetwork {
    pub cfg: FrameNetConfig,
    stem: Conv1d,
    stem_bn: BatchNorm1d,
    branches: Vec<Branch>,
    fc1: Linear,
    fc2: Linear,
}

fn check(g: &Graph, v: Var, layer: &str) -> Result<()> {
    if g.value(v).all_finite() {
        Ok(())
    } else {
        Err(Error::Numerical { layer: layer.to_string() })
    }
}

impl FrameNetwork {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: FrameNetConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let p = |s: &str| format!("{prefix}.{s}");
        let stem = Conv1d::new(
            store,
            &p("stem.conv"),
            1,
            cfg.stem_channels,
            cfg.stem_kernel,
            cfg.stem_stride,
            cfg.stem_kernel / 2,
            true,
            rng,
        );
        let stem_bn = BatchNorm1d::new(store, &p("stem.bn"), cfg.stem_channels);
        let mut branches = Vec::new();
        for (bi, &k) in cfg.branch_kernels.iter().enumerate() {
            let skip = (cfg.stem_channels != cfg.branch_channels).then(|| {
                Conv1d::new(
                    store,
                    &p(&format!("branch{bi}.skip")),
                    cfg.stem_channels,
                    cfg.branch_channels,
                    1,
                    1,
                    0,
                    false,
                    rng,
                )
            });
            let mut blocks = Vec::new();
            for j in 0..cfg.blocks_per_branch {
                let c_in = if j == 0 { cfg.stem_channels } else { cfg.branch_channels };
                let name = p(&format!("branch{bi}.block{j}"));
                blocks.push(ConvBlock {
                    conv: Conv1d::new(store, &format!("{name}.conv"), c_in, cfg.branch_channels, k, 1, k / 2, true, rng),
                    bn: BatchNorm1d::new(store, &format!("{name}.bn"), cfg.branch_channels),
                });
            }
            branches.push(Branch { skip, blocks });
        }
        let fc1 = Linear::new(store, &p("fc1"), 3 * cfg.branch_channels, cfg.hidden(), true, rng);
        let fc2 = Linear::new(store, &p("fc2"), cfg.hidden(), cfg.embed_dim, true, rng);
        Ok(Self {
            cfg,
            stem,
            stem_bn,
            branches,
            fc1,
            fc2,
        })
    }

    /// `frames: [F, 1, frame_len]` to embeddings `[F, embed_dim]`.
    ///
    /// In training mode batch statistics come from all `F` frames and the
    /// running statistics are updated through the graph's buffer queue.
    pub fn forward(&self, g: &mut Graph, frames: Var, training: bool) -> Result<Var> {
        let frame_len = *g.shape(frames).last().unwrap();
        if self.cfg.stem_output_len(frame_len) == 0 {
            return Err(Error::Config(format!("frame of {frame_len} samples vanishes in the stem")));
        }
        let x = self.stem.forward(g, frames);
        let x = self.stem_bn.forward(g, x, training);
        let x = g.max_pool1d(x, self.cfg.pool);
        check(g, x, "frame_net.stem")?;
        let mut pooled = Vec::with_capacity(3);
        for (bi, branch) in self.branches.iter().enumerate() {
            let mut h = x;
            for blk in &branch.blocks {
                h = blk.conv.forward(g, h);
                h = blk.bn.forward(g, h, training);
                h = g.elu(h);
            }
            let skip = match &branch.skip {
                Some(conv) => conv.forward(g, x),
                None => x,
            };
            let h = g.add(h, skip);
            check(g, h, &format!("frame_net.branch{bi}"))?;
            pooled.push(g.mean_last(h));
        }
        let cat = g.concat(&pooled, 1);
        let h = self.fc1.forward(g, cat);
        let h = g.elu(h);
        let out = self.fc2.forward(g, h);
        check(g, out, "frame_net.fc")?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_params;
    use crate::rng;
    use crate::tensor::Tensor;

    fn mini(embed: usize, ch: usize) -> FrameNetConfig {
        FrameNetConfig {
            stem_channels: ch,
            branch_channels: ch,
            embed_dim: embed,
            fc_hidden: Some(2 * embed),
            ..FrameNetConfig::default()
        }
    }

    fn frames(n: usize, len: usize, seed: u64) -> Tensor {
        let mut r = rng::stream(seed, &[]);
        Tensor::from_fn(&[n, 1, len], |_| rng::normal(&mut r))
    }

    #[test]
    fn output_shape_for_default_framing() {
        let mut store = ParamStore::new();
        let net = FrameNetwork::new(&mut store, "fn", mini(512, 8), &mut rng::stream(1, &[])).unwrap();
        let mut g = Graph::with_params(&store);
        let x = g.input(frames(37, 300, 2));
        let z = net.forward(&mut g, x, true).unwrap();
        assert_eq!(g.shape(z), &[37, 512]);
        assert!(g.value(z).all_finite());
    }

    #[test]
    fn zero_frames_give_the_batch_norm_shift_only() {
        let mut store = ParamStore::new();
        let net = FrameNetwork::new(&mut store, "fn", mini(6, 4), &mut rng::stream(3, &[])).unwrap();
        let mut g = Graph::with_params(&store);
        let x = g.input(Tensor::zeros(&[3, 1, 40]));
        let z = net.forward(&mut g, x, true).unwrap();
        let v = g.value(z);
        assert_eq!(v.row(0), v.row(1));
        assert_eq!(v.row(0), v.row(2));
        // with every BN shift at zero the branch sums are zero, so the output
        // is fc2(elu(fc1(0))) = fc2(elu(b1)) + b2 = 0 for zero biases
        assert!(v.data().iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn eval_mode_is_bit_deterministic() {
        let mut store = ParamStore::new();
        let net = FrameNetwork::new(&mut store, "fn", mini(8, 4), &mut rng::stream(4, &[])).unwrap();
        let f = frames(1, 60, 5);
        let mut twice = f.data().to_vec();
        twice.extend_from_slice(f.data());
        let run = |store: &ParamStore| {
            let mut g = Graph::with_params(store);
            let x = g.input(Tensor::new(&[2, 1, 60], twice.clone()));
            let z = net.forward(&mut g, x, false).unwrap();
            g.value(z).clone()
        };
        let a = run(&store);
        let b = run(&store);
        assert_eq!(a, b);
        assert_eq!(a.row(0), a.row(1));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let net = FrameNetwork::new(&mut store, "fn", mini(5, 8), &mut rng::stream(6, &[])).unwrap();
        let x = frames(2, 32, 7);
        let loss = |store: &ParamStore| {
            let mut g = Graph::with_params(store);
            let xi = g.input(x.clone());
            let z = net.forward(&mut g, xi, true).unwrap();
            let s = g.sum_all(z);
            (g.value(s).item(), g.backward(s).into_params())
        };
        let (_, grads) = loss(&store);
        let ids: Vec<_> = store.ids().filter(|&id| store.is_trainable(id)).collect();
        let report = check_params(&mut store, &ids, &grads, 4, &mut rng::stream(8, &[]), |s| loss(s).0);
        assert!(report.max_rel_err < 1e-3, "{report:?}");
    }

    #[test]
    fn too_short_frames_are_rejected() {
        let mut store = ParamStore::new();
        let net = FrameNetwork::new(&mut store, "fn", mini(4, 2), &mut rng::stream(9, &[])).unwrap();
        let mut g = Graph::with_params(&store);
        let x = g.input(Tensor::zeros(&[1, 1, 2]));
        assert!(net.forward(&mut g, x, true).is_err());
    }
}
