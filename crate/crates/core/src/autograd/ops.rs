use super::{Graph, Var};
use crate::tensor::{gemm, Tensor};

/// Pointwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Elu,
    Gelu,
    Silu,
    Softplus,
    Sigmoid,
    Tanh,
    Exp,
    Square,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Self::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Self::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
            Self::Silu => x * sigmoid(x),
            Self::Softplus => softplus(x),
            Self::Sigmoid => sigmoid(x),
            Self::Tanh => x.tanh(),
            Self::Exp => x.exp(),
            Self::Square => x * x,
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Self::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Self::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
            Self::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Self::Softplus => sigmoid(x),
            Self::Sigmoid => y * (1.0 - y),
            Self::Tanh => 1.0 - y * y,
            Self::Exp => y,
            Self::Square => 2.0 * x,
        }
    }
}

/// Number of leading elements when `suffix` is broadcast over `full`.
fn broadcast_outer(full: &[usize], suffix: &[usize]) -> usize {
    assert!(
        suffix.len() <= full.len() && full[full.len() - suffix.len()..] == *suffix,
        "cannot broadcast {suffix:?} over {full:?}"
    );
    full[..full.len() - suffix.len()].iter().product()
}

fn sum_leading(g: &Tensor, suffix: &[usize]) -> Tensor {
    let inner: usize = suffix.iter().product();
    let mut out = vec![0.0; inner];
    for chunk in g.data().chunks(inner.max(1)) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Tensor::new(suffix, out)
}

impl Graph<'_> {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, vec![a, b], Box::new(|g, _, _, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(
            v,
            vec![a, b],
            Box::new(|g, _, _, _| vec![Some(g.clone()), Some(g.map(|x| -x))]),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(
            v,
            vec![a, b],
            Box::new(|g, inp, _, needs| {
                vec![
                    needs[0].then(|| g.zip_map(inp[1], |g, y| g * y)),
                    needs[1].then(|| g.zip_map(inp[0], |g, x| g * x)),
                ]
            }),
        )
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s (bias-style broadcast).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        broadcast_outer(av.shape(), bv.shape());
        let inner = bv.len().max(1);
        let mut out = av.clone();
        for chunk in out.data_mut().chunks_mut(inner) {
            for (o, x) in chunk.iter_mut().zip(bv.data()) {
                *o += x;
            }
        }
        let bshape = bv.shape().to_vec();
        self.push(
            out,
            vec![a, b],
            Box::new(move |g, _, _, needs| {
                vec![
                    needs[0].then(|| g.clone()),
                    needs[1].then(|| sum_leading(g, &bshape)),
                ]
            }),
        )
    }

    /// `a * b` where `b`'s shape is a suffix of `a`'s.
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        broadcast_outer(av.shape(), bv.shape());
        let inner = bv.len().max(1);
        let mut out = av.clone();
        for chunk in out.data_mut().chunks_mut(inner) {
            for (o, x) in chunk.iter_mut().zip(bv.data()) {
                *o *= x;
            }
        }
        let bshape = bv.shape().to_vec();
        self.push(
            out,
            vec![a, b],
            Box::new(move |g, inp, _, needs| {
                let inner = inp[1].len().max(1);
                let ga = needs[0].then(|| {
                    let mut ga = g.clone();
                    for chunk in ga.data_mut().chunks_mut(inner) {
                        for (o, x) in chunk.iter_mut().zip(inp[1].data()) {
                            *o *= x;
                        }
                    }
                    ga
                });
                let gb = needs[1].then(|| {
                    let mut gb = vec![0.0; inner];
                    for (gc, xc) in g.data().chunks(inner).zip(inp[0].data().chunks(inner)) {
                        for ((o, gv), xv) in gb.iter_mut().zip(gc).zip(xc) {
                            *o += gv * xv;
                        }
                    }
                    Tensor::new(&bshape, gb)
                });
                vec![ga, gb]
            }),
        )
    }

    /// Adds a constant tensor broadcast over leading dimensions.
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Var {
        let av = self.value(a);
        broadcast_outer(av.shape(), c.shape());
        let inner = c.len().max(1);
        let mut out = av.clone();
        for chunk in out.data_mut().chunks_mut(inner) {
            for (o, x) in chunk.iter_mut().zip(c.data()) {
                *o += x;
            }
        }
        self.push(out, vec![a], Box::new(|g, _, _, _| vec![Some(g.clone())]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, vec![a], Box::new(move |g, _, _, _| vec![Some(g.map(|x| x * s))]))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Var {
        let v = self.value(a).map(|x| act.apply(x));
        self.push(
            v,
            vec![a],
            Box::new(move |g, inp, out, _| {
                let data = g
                    .data()
                    .iter()
                    .zip(inp[0].data())
                    .zip(out.data())
                    .map(|((g, &x), &y)| g * act.derivative(x, y))
                    .collect();
                vec![Some(Tensor::new(g.shape(), data))]
            }),
        )
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Elu)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Gelu)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Silu)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(
            v,
            vec![a],
            Box::new(|g, inp, _, _| vec![Some(Tensor::full(inp[0].shape(), g.item()))]),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean over the last axis: `[.., L] -> [..]`.
    pub fn mean_last(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let shape = av.shape();
        let l = *shape.last().expect("mean_last on scalar");
        let out_shape = shape[..shape.len() - 1].to_vec();
        let data = av.data().chunks(l).map(|c| c.iter().sum::<f64>() / l as f64).collect();
        self.push(
            Tensor::new(&out_shape, data),
            vec![a],
            Box::new(move |g, inp, _, _| {
                let mut out = Vec::with_capacity(inp[0].len());
                for &gv in g.data() {
                    out.extend(std::iter::repeat_n(gv / l as f64, l));
                }
                vec![Some(Tensor::new(inp[0].shape(), out))]
            }),
        )
    }

    /// `[.., k] x [k, n] -> [.., n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        assert_eq!(wv.ndim(), 2, "matmul weight must be 2-d");
        let (k, n) = (wv.dim(0), wv.dim(1));
        let xs = xv.shape();
        assert_eq!(*xs.last().unwrap(), k, "matmul: {xs:?} x {:?}", wv.shape());
        let rows = xv.len() / k;
        let mut out = vec![0.0; rows * n];
        gemm(rows, k, n, 1.0, xv.data(), (k, 1), wv.data(), (n, 1), 0.0, &mut out, (n, 1));
        let mut out_shape = xs.to_vec();
        *out_shape.last_mut().unwrap() = n;
        self.push(
            Tensor::new(&out_shape, out),
            vec![x, w],
            Box::new(move |g, inp, _, needs| {
                let gx = needs[0].then(|| {
                    let mut gx = vec![0.0; rows * k];
                    gemm(rows, n, k, 1.0, g.data(), (n, 1), inp[1].data(), (1, n), 0.0, &mut gx, (k, 1));
                    Tensor::new(inp[0].shape(), gx)
                });
                let gw = needs[1].then(|| {
                    let mut gw = vec![0.0; k * n];
                    gemm(k, rows, n, 1.0, inp[0].data(), (1, k), g.data(), (n, 1), 0.0, &mut gw, (n, 1));
                    Tensor::new(&[k, n], gw)
                });
                vec![gx, gw]
            }),
        )
    }

    /// Batched matmul `[B, m, k] x [B, k, n] -> [B, m, n]`, with optional
    /// transposition of the last two axes of either operand.
    pub fn bmm(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert!(av.ndim() == 3 && bv.ndim() == 3, "bmm expects 3-d operands");
        let batch = av.dim(0);
        assert_eq!(batch, bv.dim(0));
        let (m, k) = if trans_a { (av.dim(2), av.dim(1)) } else { (av.dim(1), av.dim(2)) };
        let (k2, n) = if trans_b { (bv.dim(2), bv.dim(1)) } else { (bv.dim(1), bv.dim(2)) };
        assert_eq!(k, k2, "bmm inner dims {:?} {:?}", av.shape(), bv.shape());
        // strides of the logical (untransposed) views
        let sa = if trans_a { (1, m) } else { (k, 1) };
        let sb = if trans_b { (1, k) } else { (n, 1) };
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                1.0,
                &av.data()[i * m * k..(i + 1) * m * k],
                sa,
                &bv.data()[i * k * n..(i + 1) * k * n],
                sb,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
                (n, 1),
            );
        }
        self.push(
            Tensor::new(&[batch, m, n], out),
            vec![a, b],
            Box::new(move |g, inp, _, needs| {
                let gd = g.data();
                let ga = needs[0].then(|| {
                    // dA = G B^T (then transpose back if A was transposed)
                    let mut ga = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        let gi = &gd[i * m * n..(i + 1) * m * n];
                        let bi = &inp[1].data()[i * k * n..(i + 1) * k * n];
                        let out = &mut ga[i * m * k..(i + 1) * m * k];
                        let bt = (sb.1, sb.0);
                        let dst = if trans_a { (1, m) } else { (k, 1) };
                        gemm(m, n, k, 1.0, gi, (n, 1), bi, bt, 0.0, out, dst);
                    }
                    Tensor::new(inp[0].shape(), ga)
                });
                let gb = needs[1].then(|| {
                    // dB = A^T G
                    let mut gb = vec![0.0; batch * k * n];
                    for i in 0..batch {
                        let gi = &gd[i * m * n..(i + 1) * m * n];
                        let ai = &inp[0].data()[i * m * k..(i + 1) * m * k];
                        let out = &mut gb[i * k * n..(i + 1) * k * n];
                        let at = (sa.1, sa.0);
                        let dst = if trans_b { (1, k) } else { (n, 1) };
                        gemm(k, m, n, 1.0, ai, at, gi, (n, 1), 0.0, out, dst);
                    }
                    Tensor::new(inp[1].shape(), gb)
                });
                vec![ga, gb]
            }),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a).clone().reshape(shape);
        self.push(
            v,
            vec![a],
            Box::new(|g, inp, _, _| vec![Some(g.clone().reshape(inp[0].shape()))]),
        )
    }

    /// General axis permutation; `perm[i]` is the source axis of output axis `i`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Var {
        let v = permute_tensor(self.value(a), perm);
        let mut inv = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        self.push(
            v,
            vec![a],
            Box::new(move |g, _, _, _| vec![Some(permute_tensor(g, &inv))]),
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let shapes: Vec<Vec<usize>> = parts.iter().map(|&p| self.shape(p).to_vec()).collect();
        let base = &shapes[0];
        for s in &shapes {
            assert_eq!(s.len(), base.len());
            for (d, (x, y)) in s.iter().zip(base).enumerate() {
                assert!(d == axis || x == y, "concat shape mismatch {s:?} vs {base:?}");
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let sizes: Vec<usize> = shapes.iter().map(|s| s[axis]).collect();
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &sz) in parts.iter().zip(&sizes) {
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        self.push(
            Tensor::new(&out_shape, out),
            parts.to_vec(),
            Box::new(move |g, _, _, needs| {
                let mut grads: Vec<Vec<f64>> =
                    sizes.iter().map(|&sz| Vec::with_capacity(outer * sz * inner)).collect();
                let gd = g.data();
                let mut pos = 0;
                for _ in 0..outer {
                    for (gi, &sz) in grads.iter_mut().zip(&sizes) {
                        gi.extend_from_slice(&gd[pos..pos + sz * inner]);
                        pos += sz * inner;
                    }
                }
                grads
                    .into_iter()
                    .zip(&shapes)
                    .zip(needs)
                    .map(|((gi, s), &need)| need.then(|| Tensor::new(s, gi)))
                    .collect()
            }),
        )
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let shape = av.shape().to_vec();
        assert!(start + len <= shape[axis], "narrow out of range");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&av.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        self.push(
            Tensor::new(&out_shape, out),
            vec![a],
            Box::new(move |g, _, _, _| {
                let mut gi = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    gi[base..base + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(Tensor::new(&shape, gi))]
            }),
        )
    }

    /// Row gather on `[B, S, d]`: output row `(b, t)` is input row
    /// `(b, index[b * T + t])`. Indices may repeat.
    pub fn gather_rows(&mut self, a: Var, index: &[usize], rows_per_batch: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.ndim(), 3, "gather_rows expects [B, S, d]");
        let (b, s, d) = (av.dim(0), av.dim(1), av.dim(2));
        assert_eq!(index.len(), b * rows_per_batch);
        let mut out = Vec::with_capacity(b * rows_per_batch * d);
        for bi in 0..b {
            for &src in &index[bi * rows_per_batch..(bi + 1) * rows_per_batch] {
                assert!(src < s, "gather index {src} out of range {s}");
                let base = (bi * s + src) * d;
                out.extend_from_slice(&av.data()[base..base + d]);
            }
        }
        let index = index.to_vec();
        self.push(
            Tensor::new(&[b, rows_per_batch, d], out),
            vec![a],
            Box::new(move |g, inp, _, _| {
                let mut gi = vec![0.0; b * s * d];
                for bi in 0..b {
                    for t in 0..rows_per_batch {
                        let src = index[bi * rows_per_batch + t];
                        let gbase = (bi * rows_per_batch + t) * d;
                        let base = (bi * s + src) * d;
                        for j in 0..d {
                            gi[base + j] += g.data()[gbase + j];
                        }
                    }
                }
                vec![Some(Tensor::new(inp[0].shape(), gi))]
            }),
        )
    }

    /// Repeats `a` along a new leading axis of size `n`.
    pub fn expand_leading(&mut self, a: Var, n: usize) -> Var {
        let av = self.value(a);
        let mut shape = vec![n];
        shape.extend_from_slice(av.shape());
        let mut out = Vec::with_capacity(n * av.len());
        for _ in 0..n {
            out.extend_from_slice(av.data());
        }
        self.push(
            Tensor::new(&shape, out),
            vec![a],
            Box::new(|g, inp, _, _| vec![Some(sum_leading(g, inp[0].shape()))]),
        )
    }

    /// Same value, cut from the tape.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.input(v)
    }

    pub fn softmax_last(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let d = *av.shape().last().unwrap();
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(d) {
            softmax_in_place(row);
        }
        self.push(
            out,
            vec![a],
            Box::new(move |g, _, y, _| {
                let mut gx = Vec::with_capacity(g.len());
                for (gr, yr) in g.data().chunks(d).zip(y.data().chunks(d)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    gx.extend(gr.iter().zip(yr).map(|(gv, yv)| yv * (gv - dot)));
                }
                vec![Some(Tensor::new(g.shape(), gx))]
            }),
        )
    }

    pub fn log_softmax_last(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let d = *av.shape().last().unwrap();
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(d) {
            let lse = log_sum_exp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.push(
            out,
            vec![a],
            Box::new(move |g, _, y, _| {
                let mut gx = Vec::with_capacity(g.len());
                for (gr, yr) in g.data().chunks(d).zip(y.data().chunks(d)) {
                    let s: f64 = gr.iter().sum();
                    gx.extend(gr.iter().zip(yr).map(|(gv, yv)| gv - yv.exp() * s));
                }
                vec![Some(Tensor::new(g.shape(), gx))]
            }),
        )
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap();
        assert_eq!(self.value(gamma).shape(), [d]);
        assert_eq!(self.value(beta).shape(), [d]);
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        for (r, (xr, hr)) in xv.data().chunks(d).zip(xhat.chunks_mut(d)).enumerate() {
            let mu = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for (h, v) in hr.iter_mut().zip(xr) {
                *h = (v - mu) * rs;
            }
        }
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = xhat.clone();
        for row in out.chunks_mut(d) {
            for ((o, g), b) in row.iter_mut().zip(gv).zip(bv) {
                *o = *o * g + b;
            }
        }
        let shape = xv.shape().to_vec();
        self.push(
            Tensor::new(&shape, out),
            vec![x, gamma, beta],
            Box::new(move |g, inp, _, needs| {
                let gamma = inp[1].data();
                let mut gx = vec![0.0; g.len()];
                let mut ggamma = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                for (r, ((gr, hr), gxr)) in g
                    .data()
                    .chunks(d)
                    .zip(xhat.chunks(d))
                    .zip(gx.chunks_mut(d))
                    .enumerate()
                {
                    let mut mean_gh = 0.0;
                    let mut mean_ghx = 0.0;
                    for j in 0..d {
                        let gh = gr[j] * gamma[j];
                        mean_gh += gh;
                        mean_ghx += gh * hr[j];
                        ggamma[j] += gr[j] * hr[j];
                        gbeta[j] += gr[j];
                    }
                    mean_gh /= d as f64;
                    mean_ghx /= d as f64;
                    for j in 0..d {
                        gxr[j] = rstd[r] * (gr[j] * gamma[j] - mean_gh - hr[j] * mean_ghx);
                    }
                }
                vec![
                    needs[0].then(|| Tensor::new(&shape, gx)),
                    needs[1].then(|| Tensor::new(&[d], ggamma)),
                    needs[2].then(|| Tensor::new(&[d], gbeta)),
                ]
            }),
        )
    }

    /// Scales every vector along the last axis to unit L2 norm.
    pub fn l2_normalize_last(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap();
        let norms: Vec<f64> = xv
            .data()
            .chunks(d)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let mut out = xv.clone();
        for (row, n) in out.data_mut().chunks_mut(d).zip(&norms) {
            for v in row {
                *v /= n;
            }
        }
        self.push(
            out,
            vec![x],
            Box::new(move |g, _, y, _| {
                let mut gx = Vec::with_capacity(g.len());
                for ((gr, yr), n) in g.data().chunks(d).zip(y.data().chunks(d)).zip(&norms) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    gx.extend(gr.iter().zip(yr).map(|(gv, yv)| (gv - yv * dot) / n));
                }
                vec![Some(Tensor::new(g.shape(), gx))]
            }),
        )
    }

    /// Mean (optionally class-weighted) cross-entropy of `[n, C]` logits.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], class_weights: Option<&[f64]>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.ndim(), 2);
        let (n, c) = (lv.dim(0), lv.dim(1));
        assert_eq!(targets.len(), n, "one target per row");
        let w: Vec<f64> = targets
            .iter()
            .map(|&t| {
                assert!(t < c, "target {t} out of range");
                class_weights.map_or(1.0, |cw| cw[t])
            })
            .collect();
        let wsum: f64 = w.iter().sum();
        let mut probs = lv.clone();
        let mut loss = 0.0;
        for (i, row) in probs.data_mut().chunks_mut(c).enumerate() {
            let lse = log_sum_exp(row);
            loss += w[i] * (lse - row[targets[i]]);
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let targets = targets.to_vec();
        self.push(
            Tensor::scalar(loss / wsum),
            vec![logits],
            Box::new(move |g, _, _, _| {
                let s = g.item() / wsum;
                let mut gx = probs.clone();
                for (i, row) in gx.data_mut().chunks_mut(c).enumerate() {
                    row[targets[i]] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= w[i] * s;
                    }
                }
                vec![Some(gx)]
            }),
        )
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

pub(crate) fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let shape = t.shape();
    assert_eq!(perm.len(), shape.len());
    let nd = shape.len();
    let mut in_strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(t.len());
    let mut idx = vec![0usize; nd];
    let src = t.data();
    // iterate the innermost output axis as a strided run
    let last = nd - 1;
    let run = out_shape[last];
    let run_stride = strides[last];
    let outer: usize = out_shape[..last].iter().product();
    for _ in 0..outer {
        let base: usize = idx[..last].iter().zip(&strides).map(|(i, s)| i * s).sum();
        for j in 0..run {
            out.push(src[base + j * run_stride]);
        }
        for ax in (0..last).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::new(&out_shape, out)
}
