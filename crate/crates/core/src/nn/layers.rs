use rand::Rng;

use super::{ParamId, ParamKind, ParamStore};
use crate::autograd::{Graph, Var};
use crate::tensor::Tensor;

/// `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), &[d_in, d_out], d_in, rng);
        let bias = bias.then(|| store.add_const(format!("{name}.bias"), &[d_out], 0.0, ParamKind::NoDecay));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_broadcast(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add_const(format!("{name}.gamma"), &[dim], 1.0, ParamKind::NoDecay),
            beta: store.add_const(format!("{name}.beta"), &[dim], 0.0, ParamKind::NoDecay),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, self.eps)
    }
}

/// 1-d convolution layer over `[N, C, L]`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), &[c_out, c_in, kernel], c_in * kernel, rng);
        let bias = bias.then(|| store.add_const(format!("{name}.bias"), &[c_out], 0.0, ParamKind::NoDecay));
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv1d(x, w, b, self.stride, self.pad)
    }
}

/// Batch normalisation with running statistics kept as buffers.
#[derive(Clone, Debug)]
pub struct BatchNorm1d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm1d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add_const(format!("{name}.gamma"), &[channels], 1.0, ParamKind::NoDecay),
            beta: store.add_const(format!("{name}.beta"), &[channels], 0.0, ParamKind::NoDecay),
            running_mean: store.add_const(format!("{name}.running_mean"), &[channels], 0.0, ParamKind::Buffer),
            running_var: store.add_const(format!("{name}.running_var"), &[channels], 1.0, ParamKind::Buffer),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// In training mode normalises with batch statistics and queues the
    /// running-statistics update on the graph.
    pub fn forward(&self, g: &mut Graph, x: Var, training: bool) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        if training {
            let shape = g.shape(x).to_vec();
            let count = (shape[0] * shape[2]) as f64;
            let (y, mean, var) = g.batch_norm_train(x, gamma, beta, self.eps);
            let store = g.store();
            let m = self.momentum;
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            let rm = store.get(self.running_mean).zip_map(&Tensor::new(&[mean.len()], mean), |r, b| (1.0 - m) * r + m * b);
            let rv = store
                .get(self.running_var)
                .zip_map(&Tensor::new(&[var.len()], var), |r, b| (1.0 - m) * r + m * b * unbias);
            g.update_buffer(self.running_mean, rm);
            g.update_buffer(self.running_var, rv);
            y
        } else {
            let store = g.store();
            let mean = store.get(self.running_mean).data().to_vec();
            let var = store.get(self.running_var).data().to_vec();
            g.batch_norm_eval(x, gamma, beta, &mean, &var, self.eps)
        }
    }
}

/// Multi-head self-attention over `[B, T, D]`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        Self {
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, true, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, true, rng),
            heads,
            dim,
        }
    }

    /// `mask` is an additive `[T, T]` term on the attention logits.
    pub fn forward(&self, g: &mut Graph, x: Var, mask: Option<&Tensor>) -> Var {
        let shape = g.shape(x).to_vec();
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let h = self.heads;
        let dh = d / h;
        let qkv = self.qkv.forward(g, x);
        let split = |g: &mut Graph, i: usize| {
            let part = g.narrow(qkv, 2, i * d, d);
            let part = g.reshape(part, &[b, t, h, dh]);
            let part = g.permute(part, &[0, 2, 1, 3]);
            g.reshape(part, &[b * h, t, dh])
        };
        let q = split(g, 0);
        let k = split(g, 1);
        let v = split(g, 2);
        let scores = g.bmm(q, k, false, true);
        let mut scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        if let Some(m) = mask {
            scores = g.add_const(scores, m);
        }
        let att = g.softmax_last(scores);
        let ctx = g.bmm(att, v, false, false);
        let ctx = g.reshape(ctx, &[b, h, t, dh]);
        let ctx = g.permute(ctx, &[0, 2, 1, 3]);
        let ctx = g.reshape(ctx, &[b, t, d]);
        self.out.forward(g, ctx)
    }
}

/// Two-layer GELU MLP.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// Pre-norm Transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
    pub prefix: String,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, mlp_ratio: usize, rng: &mut impl Rng) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, dim * mlp_ratio, rng),
            prefix: format!("{name}."),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mask: Option<&Tensor>) -> Var {
        let h = self.ln1.forward(g, x);
        let h = self.attn.forward(g, h, mask);
        let x = g.add(x, h);
        let h = self.ln2.forward(g, x);
        let h = self.mlp.forward(g, h);
        g.add(x, h)
    }
}
