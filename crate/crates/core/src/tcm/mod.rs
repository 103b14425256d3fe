//! Temporal context over sequences of epoch embeddings: a selective
//! state-space (Mamba-style) stack plus LSTM and attention variants used in
//! the comparison harness.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::scan::{scan_forward, ScanDims};
use crate::autograd::{Activation, Graph, Var};
use crate::error::{Error, Result};
use crate::mae::sinusoidal;
use crate::nn::{LayerNorm, Linear, ParamId, ParamKind, ParamStore, TransformerBlock};
use crate::signal_io::StageLabel;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    /// A prediction for every position of the window.
    SeqToSeq,
    /// A single prediction for the last position.
    ManyToOne,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TcmKind {
    Mamba,
    Lstm,
    Mha,
    LstmMha,
}

impl TcmKind {
    pub fn label(self) -> &'static str {
        match self {
            TcmKind::Mamba => "Mamba",
            TcmKind::Lstm => "LSTM",
            TcmKind::Mha => "MHA",
            TcmKind::LstmMha => "LSTM+MHA",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MambaConfig {
    pub kind: TcmKind,
    pub d_model: usize,
    pub d_state: usize,
    pub d_conv: usize,
    pub expand: usize,
    pub num_blocks: usize,
    pub context_length: usize,
    pub output_mode: OutputMode,
    /// Attention heads for the MHA variants.
    pub heads: usize,
}

impl Default for MambaConfig {
    fn default() -> Self {
        Self {
            kind: TcmKind::Mamba,
            d_model: 768,
            d_state: 16,
            d_conv: 4,
            expand: 2,
            num_blocks: 2,
            context_length: 20,
            output_mode: OutputMode::SeqToSeq,
            heads: 8,
        }
    }
}

impl MambaConfig {
    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }

    pub fn dt_rank(&self) -> usize {
        self.d_model.div_ceil(16)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_state == 0 || self.expand == 0 {
            return Err(Error::Config("d_model, d_state and expand must be positive".into()));
        }
        if self.d_conv == 0 {
            return Err(Error::Config("d_conv must be at least 1".into()));
        }
        if self.context_length == 0 {
            return Err(Error::Config("context_length must be at least 1".into()));
        }
        if matches!(self.kind, TcmKind::Mha | TcmKind::LstmMha) && (self.heads == 0 || self.d_model % self.heads != 0) {
            return Err(Error::Config(format!("{} heads do not divide d_model {}", self.heads, self.d_model)));
        }
        Ok(())
    }
}

/// Reference selective scan for one sequence: `x, Δ: [L, D]`, `A: [D, N]`,
/// `B, C: [L, N]`, `D: [D]`.
pub fn selective_scan(x: &Tensor, delta: &Tensor, a: &Tensor, b: &Tensor, c: &Tensor, d: &Tensor) -> Result<Tensor> {
    let dims = ScanDims::infer(x, a)?;
    let (y, _) = scan_forward(dims, x.data(), delta.data(), a.data(), b.data(), c.data(), d.data(), false)?;
    Ok(Tensor::new(x.shape(), y))
}

/// The same recurrence evaluated chunk by chunk: inside a chunk every state
/// is written in closed form from the state carried in and the cumulative
/// log-decay, and only the chunk's final state is handed to the next one.
pub fn selective_scan_chunked(
    x: &Tensor,
    delta: &Tensor,
    a: &Tensor,
    b: &Tensor,
    c: &Tensor,
    d: &Tensor,
    chunk: usize,
) -> Result<Tensor> {
    if chunk == 0 {
        return Err(Error::Config("chunk size must be positive".into()));
    }
    let dims = ScanDims::infer(x, a)?;
    if dims.batch != 1 {
        return Err(Error::Shape("chunked scan takes a single [L, D] sequence".into()));
    }
    let (len, dn, ns) = (dims.len, dims.channels, dims.state);
    let (xv, dv, av, bv, cv) = (x.data(), delta.data(), a.data(), b.data(), c.data());
    let mut y = vec![0.0; len * dn];
    let mut carry = vec![0.0; dn * ns];
    let mut cum = vec![0.0; chunk];
    for start in (0..len).step_by(chunk) {
        let end = (start + chunk).min(len);
        for ch in 0..dn {
            for n in 0..ns {
                let an = av[ch * ns + n];
                let mut s = 0.0;
                for t in start..end {
                    s += dv[t * dn + ch] * an;
                    cum[t - start] = s;
                }
                let h_in = carry[ch * ns + n];
                let mut h_t = 0.0;
                for t in start..end {
                    let mut h = (cum[t - start]).exp() * h_in;
                    for u in start..=t {
                        let decay = (cum[t - start] - cum[u - start]).exp();
                        h += decay * dv[u * dn + ch] * bv[u * ns + n] * xv[u * dn + ch];
                    }
                    y[t * dn + ch] += cv[t * ns + n] * h;
                    h_t = h;
                }
                carry[ch * ns + n] = h_t;
            }
        }
    }
    for t in 0..len {
        for ch in 0..dn {
            y[t * dn + ch] += d.data()[ch] * xv[t * dn + ch];
            if !y[t * dn + ch].is_finite() {
                return Err(Error::Numerical {
                    layer: format!("selective_scan t={t} channel={ch}"),
                });
            }
        }
    }
    Ok(Tensor::new(x.shape(), y))
}

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// One residual selective state-space block over `[B, L, d_model]`.
#[derive(Clone, Debug)]
pub struct MambaBlock {
    pub norm: LayerNorm,
    pub in_proj: Linear,
    pub conv_weight: ParamId,
    pub conv_bias: ParamId,
    pub x_proj: Linear,
    pub dt_proj: Linear,
    pub a_log: ParamId,
    pub d_skip: ParamId,
    pub out_proj: Linear,
    d_inner: usize,
    d_state: usize,
    dt_rank: usize,
}

impl MambaBlock {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &MambaConfig, rng: &mut impl Rng) -> Self {
        let (dm, di, ns, r) = (cfg.d_model, cfg.d_inner(), cfg.d_state, cfg.dt_rank());
        let norm = LayerNorm::new(store, &format!("{name}.norm"), dm);
        let in_proj = Linear::new(store, &format!("{name}.in_proj"), dm, 2 * di, false, rng);
        let conv_weight = store.add_uniform(format!("{name}.conv.weight"), &[di, cfg.d_conv], cfg.d_conv, rng);
        let conv_bias = store.add_const(format!("{name}.conv.bias"), &[di], 0.0, ParamKind::NoDecay);
        let x_proj = Linear::new(store, &format!("{name}.x_proj"), di, r + 2 * ns, false, rng);
        let dt_proj = Linear::new(store, &format!("{name}.dt_proj"), r, di, true, rng);
        // Δ starts log-uniform in [1e-3, 1e-1] through the softplus.
        let bias: Vec<f64> = (0..di)
            .map(|_| {
                let u: f64 = rng.random();
                inverse_softplus((1e-3f64.ln() + u * (1e-1f64.ln() - 1e-3f64.ln())).exp())
            })
            .collect();
        store.set(dt_proj.bias.expect("dt bias"), Tensor::new(&[di], bias));
        let a: Vec<f64> = (0..di).flat_map(|_| (1..=ns).map(|n| (n as f64).ln())).collect();
        let a_log = store.add(format!("{name}.a_log"), ParamKind::NoDecay, Tensor::new(&[di, ns], a));
        let d_skip = store.add_const(format!("{name}.d"), &[di], 1.0, ParamKind::NoDecay);
        let out_proj = Linear::new(store, &format!("{name}.out_proj"), di, dm, false, rng);
        Self {
            norm,
            in_proj,
            conv_weight,
            conv_bias,
            x_proj,
            dt_proj,
            a_log,
            d_skip,
            out_proj,
            d_inner: di,
            d_state: ns,
            dt_rank: r,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (di, ns, r) = (self.d_inner, self.d_state, self.dt_rank);
        let h = self.norm.forward(g, x);
        let xz = self.in_proj.forward(g, h);
        let xs = g.narrow(xz, 2, 0, di);
        let gate = g.narrow(xz, 2, di, di);
        let (w, b) = (g.param(self.conv_weight), g.param(self.conv_bias));
        let xs = g.causal_depthwise_conv(xs, w, b);
        let xs = g.silu(xs);
        let proj = self.x_proj.forward(g, xs);
        let dt = g.narrow(proj, 2, 0, r);
        let bm = g.narrow(proj, 2, r, ns);
        let cm = g.narrow(proj, 2, r + ns, ns);
        let dt = self.dt_proj.forward(g, dt);
        let dt = g.activation(dt, Activation::Softplus);
        let a_log = g.param(self.a_log);
        let a = g.activation(a_log, Activation::Exp);
        let a = g.neg(a);
        let d = g.param(self.d_skip);
        let y = g.selective_scan(xs, dt, a, bm, cm, d)?;
        let gate = g.silu(gate);
        let y = g.mul(y, gate);
        let y = self.out_proj.forward(g, y);
        Ok(g.add(x, y))
    }
}

/// Single-layer unidirectional LSTM, hidden size equal to the input width.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub input: Linear,
    pub hidden: Linear,
    dim: usize,
}

impl Lstm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        let input = Linear::new(store, &format!("{name}.input"), dim, 4 * dim, true, rng);
        let hidden = Linear::new(store, &format!("{name}.hidden"), dim, 4 * dim, false, rng);
        // Forget gate bias 1.
        let bias = input.bias.expect("lstm bias");
        let mut b = vec![0.0; 4 * dim];
        b[dim..2 * dim].fill(1.0);
        store.set(bias, Tensor::new(&[4 * dim], b));
        Self { input, hidden, dim }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let shape = g.shape(x).to_vec();
        let (bsz, len, d) = (shape[0], shape[1], self.dim);
        let xw = self.input.forward(g, x);
        let mut h = g.input(Tensor::zeros(&[bsz, d]));
        let mut c = g.input(Tensor::zeros(&[bsz, d]));
        let mut outs = Vec::with_capacity(len);
        for t in 0..len {
            let xt = g.narrow(xw, 1, t, 1);
            let xt = g.reshape(xt, &[bsz, 4 * d]);
            let hw = self.hidden.forward(g, h);
            let z = g.add(xt, hw);
            let gate = |g: &mut Graph, i: usize, act: Activation| {
                let part = g.narrow(z, 1, i * d, d);
                g.activation(part, act)
            };
            let i = gate(g, 0, Activation::Sigmoid);
            let f = gate(g, 1, Activation::Sigmoid);
            let cand = gate(g, 2, Activation::Tanh);
            let o = gate(g, 3, Activation::Sigmoid);
            let keep = g.mul(f, c);
            let write = g.mul(i, cand);
            c = g.add(keep, write);
            let tc = g.activation(c, Activation::Tanh);
            h = g.mul(o, tc);
            outs.push(g.reshape(h, &[bsz, 1, d]));
        }
        g.concat(&outs, 1)
    }
}

#[derive(Clone, Debug)]
enum Body {
    Mamba(Vec<MambaBlock>),
    Lstm(Lstm),
    Mha(Vec<TransformerBlock>),
    LstmMha(Lstm, Vec<TransformerBlock>),
}

/// Additive causal mask `[L, L]`.
pub fn causal_mask(len: usize) -> Tensor {
    let mut m = vec![0.0; len * len];
    for i in 0..len {
        for j in i + 1..len {
            m[i * len + j] = -1e30;
        }
    }
    Tensor::new(&[len, len], m)
}

/// Temporal context module: body, final norm and a per-position linear head
/// to the five stages.
#[derive(Clone, Debug)]
pub struct TemporalContext {
    pub cfg: MambaConfig,
    body: Body,
    pub norm: LayerNorm,
    pub head: Linear,
}

impl TemporalContext {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: MambaConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let dm = cfg.d_model;
        let attn = |store: &mut ParamStore, rng: &mut _, n: usize| {
            (0..n)
                .map(|i| TransformerBlock::new(store, &format!("{prefix}.attn{i}"), dm, cfg.heads, 4, rng))
                .collect::<Vec<_>>()
        };
        let body = match cfg.kind {
            TcmKind::Mamba => Body::Mamba(
                (0..cfg.num_blocks)
                    .map(|i| MambaBlock::new(store, &format!("{prefix}.block{i}"), &cfg, rng))
                    .collect(),
            ),
            TcmKind::Lstm => Body::Lstm(Lstm::new(store, &format!("{prefix}.lstm"), dm, rng)),
            TcmKind::Mha => Body::Mha(attn(store, rng, cfg.num_blocks)),
            TcmKind::LstmMha => {
                let lstm = Lstm::new(store, &format!("{prefix}.lstm"), dm, rng);
                Body::LstmMha(lstm, attn(store, rng, 1))
            }
        };
        let norm = LayerNorm::new(store, &format!("{prefix}.norm"), dm);
        let head = Linear::new(store, &format!("{prefix}.head"), dm, StageLabel::COUNT, true, rng);
        Ok(Self { cfg, body, norm, head })
    }

    fn run_attention(&self, g: &mut Graph, x: Var, blocks: &[TransformerBlock]) -> Var {
        let len = g.shape(x)[1];
        let pos: Vec<usize> = (0..len).collect();
        let mut x = g.add_const(x, &sinusoidal(&pos, self.cfg.d_model));
        let mask = causal_mask(len);
        for blk in blocks {
            x = blk.forward(g, x, Some(&mask));
        }
        x
    }

    /// Hidden features `[B, L, d_model]` before the head.
    pub fn features(&self, g: &mut Graph, tokens: Var) -> Result<Var> {
        let shape = g.shape(tokens);
        if shape.len() != 3 || shape[2] != self.cfg.d_model {
            return Err(Error::Shape(format!("context tokens {:?}, width {}", shape, self.cfg.d_model)));
        }
        let x = match &self.body {
            Body::Mamba(blocks) => {
                let mut x = tokens;
                for blk in blocks {
                    x = blk.forward(g, x)?;
                }
                x
            }
            Body::Lstm(lstm) => lstm.forward(g, tokens),
            Body::Mha(blocks) => self.run_attention(g, tokens, blocks),
            Body::LstmMha(lstm, blocks) => {
                let x = lstm.forward(g, tokens);
                self.run_attention(g, x, blocks)
            }
        };
        Ok(self.norm.forward(g, x))
    }

    /// Stage logits `[B, L, 5]` for every position.
    pub fn logits(&self, g: &mut Graph, tokens: Var) -> Result<Var> {
        let h = self.features(g, tokens)?;
        Ok(self.head.forward(g, h))
    }

    /// Logits for the configured output mode, checking the window length:
    /// `[B, L, 5]` or `[B, 5]`.
    pub fn classify(&self, g: &mut Graph, tokens: Var) -> Result<Var> {
        let shape = g.shape(tokens).to_vec();
        if shape.len() != 3 || shape[1] != self.cfg.context_length {
            return Err(Error::Shape(format!(
                "expected windows of {} epochs, got {:?}",
                self.cfg.context_length, shape
            )));
        }
        let logits = self.logits(g, tokens)?;
        Ok(match self.cfg.output_mode {
            OutputMode::SeqToSeq => logits,
            OutputMode::ManyToOne => {
                let last = g.narrow(logits, 1, shape[1] - 1, 1);
                g.reshape(last, &[shape[0], StageLabel::COUNT])
            }
        })
    }

    /// Mean cross-entropy; `targets` holds one label per logit row
    /// (per position in seq-to-seq mode, per window otherwise).
    pub fn loss(&self, g: &mut Graph, logits: Var, targets: &[usize], class_weights: Option<&[f64]>) -> Result<Var> {
        let rows = g.value(logits).len() / StageLabel::COUNT;
        if rows != targets.len() {
            return Err(Error::Shape(format!("{} logit rows for {} targets", rows, targets.len())));
        }
        let flat = g.reshape(logits, &[rows, StageLabel::COUNT]);
        Ok(g.cross_entropy(flat, targets, class_weights))
    }
}

/// One inference window over a recording: the epoch indices fed to the
/// model and the first position whose prediction is kept.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Window {
    pub indices: Vec<usize>,
    pub keep_from: usize,
}

/// Non-overlapping windows of `ctx` epochs. A final partial window is
/// left-padded by repeating its own first epoch; padded positions are not kept.
pub fn context_windows(num_epochs: usize, ctx: usize) -> Vec<Window> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < num_epochs {
        let end = (start + ctx).min(num_epochs);
        let pad = ctx - (end - start);
        let mut indices = vec![start; pad];
        indices.extend(start..end);
        out.push(Window { indices, keep_from: pad });
        start = end;
    }
    out
}

#[cfg(test)]
mod tests;
