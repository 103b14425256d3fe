use super::{Graph, Var};
use crate::tensor::{gemm, Tensor};

/// Geometry of a 1-d convolution over `[N, C_in, L]`.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c_in: usize,
    len: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_len: usize,
}

impl ConvGeom {
    fn cols(&self) -> usize {
        self.c_in * self.k
    }

    /// `cols[(ci * K + kk), t] = x[ci, t * stride + kk - pad]`, zero outside.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        for ci in 0..self.c_in {
            let xr = &x[ci * self.len..(ci + 1) * self.len];
            for kk in 0..self.k {
                let row = &mut cols[(ci * self.k + kk) * self.out_len..(ci * self.k + kk + 1) * self.out_len];
                for (t, c) in row.iter_mut().enumerate() {
                    let pos = (t * self.stride + kk) as isize - self.pad as isize;
                    *c = if pos >= 0 && (pos as usize) < self.len {
                        xr[pos as usize]
                    } else {
                        0.0
                    };
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], gx: &mut [f64]) {
        for ci in 0..self.c_in {
            let gr = &mut gx[ci * self.len..(ci + 1) * self.len];
            for kk in 0..self.k {
                let row = &cols[(ci * self.k + kk) * self.out_len..(ci * self.k + kk + 1) * self.out_len];
                for (t, c) in row.iter().enumerate() {
                    let pos = (t * self.stride + kk) as isize - self.pad as isize;
                    if pos >= 0 && (pos as usize) < self.len {
                        gr[pos as usize] += c;
                    }
                }
            }
        }
    }
}

impl Graph<'_> {
    /// 1-d cross-correlation: `x [N, C_in, L]`, `w [C_out, C_in, K]`,
    /// optional `bias [C_out]`, zero padding `pad` on both sides.
    pub fn conv1d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        assert_eq!(xv.ndim(), 3, "conv1d input must be [N, C, L]");
        assert_eq!(wv.ndim(), 3, "conv1d weight must be [C_out, C_in, K]");
        assert_eq!(xv.dim(1), wv.dim(1), "conv1d channel mismatch");
        let (n, c_in, len) = (xv.dim(0), xv.dim(1), xv.dim(2));
        let (c_out, k) = (wv.dim(0), wv.dim(2));
        assert!(len + 2 * pad >= k, "conv1d kernel longer than padded input");
        let geom = ConvGeom {
            n,
            c_in,
            len,
            k,
            stride,
            pad,
            out_len: (len + 2 * pad - k) / stride + 1,
        };
        let lo = geom.out_len;
        let ck = geom.cols();
        let mut out = vec![0.0; n * c_out * lo];
        let mut cols = vec![0.0; ck * lo];
        for s in 0..n {
            geom.im2col(&xv.data()[s * c_in * len..(s + 1) * c_in * len], &mut cols);
            gemm(
                c_out,
                ck,
                lo,
                1.0,
                wv.data(),
                (ck, 1),
                &cols,
                (lo, 1),
                0.0,
                &mut out[s * c_out * lo..(s + 1) * c_out * lo],
                (lo, 1),
            );
        }
        let mut parents = vec![x, w];
        if let Some(b) = bias {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), c_out);
            for (i, row) in out.chunks_mut(lo).enumerate() {
                let b = bv[i % c_out];
                for v in row {
                    *v += b;
                }
            }
            parents.push(b);
        }
        self.push(
            Tensor::new(&[n, c_out, lo], out),
            parents,
            Box::new(move |g, inp, _, needs| {
                let gd = g.data();
                let (xv, wv) = (inp[0], inp[1]);
                let mut cols = vec![0.0; ck * lo];
                let mut gcols = vec![0.0; ck * lo];
                let mut gx = needs[0].then(|| vec![0.0; geom.n * c_in * len]);
                let mut gw = needs[1].then(|| vec![0.0; c_out * ck]);
                for s in 0..geom.n {
                    let gs = &gd[s * c_out * lo..(s + 1) * c_out * lo];
                    if let Some(gw) = gw.as_mut() {
                        geom.im2col(&xv.data()[s * c_in * len..(s + 1) * c_in * len], &mut cols);
                        gemm(c_out, lo, ck, 1.0, gs, (lo, 1), &cols, (1, lo), 1.0, gw, (ck, 1));
                    }
                    if let Some(gx) = gx.as_mut() {
                        gemm(ck, c_out, lo, 1.0, wv.data(), (1, ck), gs, (lo, 1), 0.0, &mut gcols, (lo, 1));
                        geom.col2im(&gcols, &mut gx[s * c_in * len..(s + 1) * c_in * len]);
                    }
                }
                let mut res = vec![
                    gx.map(|d| Tensor::new(xv.shape(), d)),
                    gw.map(|d| Tensor::new(wv.shape(), d)),
                ];
                if inp.len() == 3 {
                    res.push(needs[2].then(|| {
                        let mut gb = vec![0.0; c_out];
                        for (i, c) in gd.chunks(lo).enumerate() {
                            gb[i % c_out] += c.iter().sum::<f64>();
                        }
                        Tensor::new(&[c_out], gb)
                    }));
                }
                res
            }),
        )
    }

    /// Batch normalisation over `[N, C, L]` using the statistics of this
    /// batch. Returns the output plus the per-channel mean and biased variance.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> (Var, Vec<f64>, Vec<f64>) {
        let xv = self.value(x);
        assert_eq!(xv.ndim(), 3, "batch_norm expects [N, C, L]");
        let (n, c, l) = (xv.dim(0), xv.dim(1), xv.dim(2));
        let m = (n * l) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for s in 0..n {
            for ch in 0..c {
                let row = &xv.data()[(s * c + ch) * l..(s * c + ch + 1) * l];
                mean[ch] += row.iter().sum::<f64>();
            }
        }
        for mu in &mut mean {
            *mu /= m;
        }
        for s in 0..n {
            for ch in 0..c {
                let row = &xv.data()[(s * c + ch) * l..(s * c + ch + 1) * l];
                var[ch] += row.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        for v in &mut var {
            *v /= m;
        }
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        assert_eq!(gv.len(), c);
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for (i, (row, (hrow, orow))) in xv
            .data()
            .chunks(l)
            .zip(xhat.chunks_mut(l).zip(out.chunks_mut(l)))
            .enumerate()
        {
            let ch = i % c;
            for ((v, h), o) in row.iter().zip(hrow.iter_mut()).zip(orow.iter_mut()) {
                *h = (v - mean[ch]) * rstd[ch];
                *o = *h * gv[ch] + bv[ch];
            }
        }
        let shape = xv.shape().to_vec();
        let y = self.push(
            Tensor::new(&shape, out),
            vec![x, gamma, beta],
            Box::new(move |g, inp, _, needs| {
                let gamma = inp[1].data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gh = vec![0.0; c];
                for (i, (gr, hr)) in g.data().chunks(l).zip(xhat.chunks(l)).enumerate() {
                    let ch = i % c;
                    for (gv, hv) in gr.iter().zip(hr) {
                        sum_g[ch] += gv;
                        sum_gh[ch] += gv * hv;
                    }
                }
                let gx = needs[0].then(|| {
                    let mut gx = vec![0.0; g.len()];
                    for (i, ((gr, hr), out)) in g
                        .data()
                        .chunks(l)
                        .zip(xhat.chunks(l))
                        .zip(gx.chunks_mut(l))
                        .enumerate()
                    {
                        let ch = i % c;
                        let scale = gamma[ch] * rstd[ch] / m;
                        for ((gv, hv), o) in gr.iter().zip(hr).zip(out.iter_mut()) {
                            *o = scale * (m * gv - sum_g[ch] - hv * sum_gh[ch]);
                        }
                    }
                    Tensor::new(&shape, gx)
                });
                vec![
                    gx,
                    needs[1].then(|| Tensor::new(&[c], sum_gh.clone())),
                    needs[2].then(|| Tensor::new(&[c], sum_g.clone())),
                ]
            }),
        );
        (y, mean, var)
    }

    /// Batch normalisation with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.ndim(), 3, "batch_norm expects [N, C, L]");
        let (c, l) = (xv.dim(1), xv.dim(2));
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mean = mean.to_vec();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = xv.clone();
        for (i, row) in out.data_mut().chunks_mut(l).enumerate() {
            let ch = i % c;
            for v in row {
                *v = (*v - mean[ch]) * rstd[ch] * gv[ch] + bv[ch];
            }
        }
        self.push(
            out,
            vec![x, gamma, beta],
            Box::new(move |g, inp, _, needs| {
                let gamma = inp[1].data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gh = vec![0.0; c];
                let mut gx = vec![0.0; g.len()];
                for (i, ((gr, xr), o)) in g
                    .data()
                    .chunks(l)
                    .zip(inp[0].data().chunks(l))
                    .zip(gx.chunks_mut(l))
                    .enumerate()
                {
                    let ch = i % c;
                    for ((gv, xv), ov) in gr.iter().zip(xr).zip(o.iter_mut()) {
                        let h = (xv - mean[ch]) * rstd[ch];
                        sum_g[ch] += gv;
                        sum_gh[ch] += gv * h;
                        *ov = gv * gamma[ch] * rstd[ch];
                    }
                }
                vec![
                    needs[0].then(|| Tensor::new(inp[0].shape(), gx)),
                    needs[1].then(|| Tensor::new(&[c], sum_gh)),
                    needs[2].then(|| Tensor::new(&[c], sum_g)),
                ]
            }),
        )
    }

    /// Non-overlapping max pooling of width `w` over the last axis
    /// (trailing remainder dropped).
    pub fn max_pool1d(&mut self, x: Var, w: usize) -> Var {
        let xv = self.value(x);
        let l = *xv.shape().last().unwrap();
        let lo = l / w;
        assert!(lo > 0, "max_pool1d width {w} exceeds length {l}");
        let rows = xv.len() / l;
        let mut out = Vec::with_capacity(rows * lo);
        let mut arg = Vec::with_capacity(rows * lo);
        for (r, row) in xv.data().chunks(l).enumerate() {
            for t in 0..lo {
                let mut best = t * w;
                for j in t * w + 1..(t + 1) * w {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                out.push(row[best]);
                arg.push(r * l + best);
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = lo;
        self.push(
            Tensor::new(&shape, out),
            vec![x],
            Box::new(move |g, inp, _, _| {
                let mut gx = vec![0.0; inp[0].len()];
                for (gv, &a) in g.data().iter().zip(&arg) {
                    gx[a] += gv;
                }
                vec![Some(Tensor::new(inp[0].shape(), gx))]
            }),
        )
    }
}
