use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Dimensions of a batched selective scan.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ScanDims {
    pub batch: usize,
    pub len: usize,
    pub channels: usize,
    pub state: usize,
}

impl ScanDims {
    pub(crate) fn infer(x: &Tensor, a: &Tensor) -> Result<Self> {
        let (batch, len, channels) = match *x.shape() {
            [l, d] => (1, l, d),
            [b, l, d] => (b, l, d),
            _ => return Err(Error::Shape(format!("scan input {:?}", x.shape()))),
        };
        if a.ndim() != 2 || a.dim(0) != channels {
            return Err(Error::Shape(format!("scan A {:?} for {channels} channels", a.shape())));
        }
        Ok(Self {
            batch,
            len,
            channels,
            state: a.dim(1),
        })
    }
}

/// Sequential recurrence
/// `h_t = exp(Δ_t A) ⊙ h_{t-1} + Δ_t B_t x_t`, `y_t = <C_t, h_t> + D x_t`.
///
/// Returns `y` (same layout as `x`) and, when `keep_states`, every `h_t`
/// laid out as `[B, L, D, N]`.
pub(crate) fn scan_forward(
    dims: ScanDims,
    x: &[f64],
    delta: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    d: &[f64],
    keep_states: bool,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let ScanDims {
        batch,
        len,
        channels: dn,
        state: ns,
    } = dims;
    let mut y = vec![0.0; batch * len * dn];
    let mut states = if keep_states { vec![0.0; batch * len * dn * ns] } else { Vec::new() };
    let mut h = vec![0.0; dn * ns];
    for bi in 0..batch {
        h.fill(0.0);
        for t in 0..len {
            let row = bi * len + t;
            let bt = &b[row * ns..(row + 1) * ns];
            let ct = &c[row * ns..(row + 1) * ns];
            for ch in 0..dn {
                let xv = x[row * dn + ch];
                let dt = delta[row * dn + ch];
                let hc = &mut h[ch * ns..(ch + 1) * ns];
                let ac = &a[ch * ns..(ch + 1) * ns];
                let mut acc = 0.0;
                for n in 0..ns {
                    hc[n] = (dt * ac[n]).exp() * hc[n] + dt * bt[n] * xv;
                    acc += ct[n] * hc[n];
                }
                let yv = acc + d[ch] * xv;
                if !yv.is_finite() {
                    return Err(Error::Numerical {
                        layer: format!("selective_scan t={t} channel={ch}"),
                    });
                }
                y[row * dn + ch] = yv;
            }
            if keep_states {
                states[row * dn * ns..(row + 1) * dn * ns].copy_from_slice(&h);
            }
        }
    }
    Ok((y, states))
}

impl Graph<'_> {
    /// Selective scan over `x, Δ: [B, L, D]`, `A: [D, N]`, `B, C: [B, L, N]`,
    /// `D: [D]`. Gradients flow to every operand.
    pub fn selective_scan(&mut self, x: Var, delta: Var, a: Var, b: Var, c: Var, d: Var) -> Result<Var> {
        let dims = ScanDims::infer(self.value(x), self.value(a))?;
        let ScanDims {
            batch,
            len,
            channels: dn,
            state: ns,
        } = dims;
        let expect = |t: &Tensor, n: usize, what: &str| -> Result<()> {
            if t.len() != n {
                return Err(Error::Shape(format!("scan {what} {:?}", t.shape())));
            }
            Ok(())
        };
        expect(self.value(delta), batch * len * dn, "delta")?;
        expect(self.value(b), batch * len * ns, "B")?;
        expect(self.value(c), batch * len * ns, "C")?;
        expect(self.value(d), dn, "D")?;
        let (y, states) = scan_forward(
            dims,
            self.value(x).data(),
            self.value(delta).data(),
            self.value(a).data(),
            self.value(b).data(),
            self.value(c).data(),
            self.value(d).data(),
            true,
        )?;
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(
            Tensor::new(&shape, y),
            vec![x, delta, a, b, c, d],
            Box::new(move |g, inp, _, _| {
                let (xv, dv, av, bv, cv, skip) = (
                    inp[0].data(),
                    inp[1].data(),
                    inp[2].data(),
                    inp[3].data(),
                    inp[4].data(),
                    inp[5].data(),
                );
                let gy = g.data();
                let mut gx = vec![0.0; xv.len()];
                let mut gdelta = vec![0.0; dv.len()];
                let mut ga = vec![0.0; av.len()];
                let mut gb = vec![0.0; bv.len()];
                let mut gc = vec![0.0; cv.len()];
                let mut gd = vec![0.0; skip.len()];
                let mut gh = vec![0.0; dn * ns];
                for bi in 0..batch {
                    gh.fill(0.0);
                    for t in (0..len).rev() {
                        let row = bi * len + t;
                        let h_t = &states[row * dn * ns..(row + 1) * dn * ns];
                        let h_prev = (t > 0).then(|| &states[(row - 1) * dn * ns..row * dn * ns]);
                        for ch in 0..dn {
                            let gyv = gy[row * dn + ch];
                            let xval = xv[row * dn + ch];
                            let dt = dv[row * dn + ch];
                            gd[ch] += gyv * xval;
                            let mut gxv = gyv * skip[ch];
                            let mut gdt = 0.0;
                            for n in 0..ns {
                                let hi = ch * ns + n;
                                gc[row * ns + n] += gyv * h_t[hi];
                                // total gradient reaching h_t
                                let ght = gh[hi] + gyv * cv[row * ns + n];
                                let abar = (dt * av[hi]).exp();
                                let hp = h_prev.map_or(0.0, |h| h[hi]);
                                let g_abar = ght * hp * abar;
                                gdt += g_abar * av[hi] + ght * bv[row * ns + n] * xval;
                                ga[hi] += g_abar * dt;
                                gb[row * ns + n] += ght * dt * xval;
                                gxv += ght * dt * bv[row * ns + n];
                                // carry to h_{t-1}
                                gh[hi] = ght * abar;
                            }
                            gx[row * dn + ch] += gxv;
                            gdelta[row * dn + ch] += gdt;
                        }
                    }
                }
                vec![
                    Some(Tensor::new(inp[0].shape(), gx)),
                    Some(Tensor::new(inp[1].shape(), gdelta)),
                    Some(Tensor::new(inp[2].shape(), ga)),
                    Some(Tensor::new(inp[3].shape(), gb)),
                    Some(Tensor::new(inp[4].shape(), gc)),
                    Some(Tensor::new(inp[5].shape(), gd)),
                ]
            }),
        ))
    }

    /// Depthwise causal convolution over time: `x [B, L, D]`, `w [D, K]`,
    /// `bias [D]`; output step `t` only sees inputs `t-K+1..=t`.
    pub fn causal_depthwise_conv(&mut self, x: Var, w: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        assert_eq!(xv.ndim(), 3, "causal conv expects [B, L, D]");
        let (batch, len, dn) = (xv.dim(0), xv.dim(1), xv.dim(2));
        assert_eq!(wv.dim(0), dn);
        let k = wv.dim(1);
        let bv = self.value(bias).data();
        let mut out = vec![0.0; xv.len()];
        for bi in 0..batch {
            for t in 0..len {
                for ch in 0..dn {
                    let mut acc = bv[ch];
                    for j in 0..k {
                        // tap j looks back k-1-j steps
                        if let Some(src) = (t + j + 1).checked_sub(k) {
                            acc += wv.data()[ch * k + j] * xv.data()[(bi * len + src) * dn + ch];
                        }
                    }
                    out[(bi * len + t) * dn + ch] = acc;
                }
            }
        }
        self.push(
            Tensor::new(&[batch, len, dn], out),
            vec![x, w, bias],
            Box::new(move |g, inp, _, _| {
                let (xd, wd) = (inp[0].data(), inp[1].data());
                let mut gx = vec![0.0; xd.len()];
                let mut gw = vec![0.0; wd.len()];
                let mut gb = vec![0.0; dn];
                for bi in 0..batch {
                    for t in 0..len {
                        for ch in 0..dn {
                            let gv = g.data()[(bi * len + t) * dn + ch];
                            gb[ch] += gv;
                            for j in 0..k {
                                if let Some(src) = (t + j + 1).checked_sub(k) {
                                    let xi = (bi * len + src) * dn + ch;
                                    gw[ch * k + j] += gv * xd[xi];
                                    gx[xi] += gv * wd[ch * k + j];
                                }
                            }
                        }
                    }
                }
                vec![
                    Some(Tensor::new(inp[0].shape(), gx)),
                    Some(Tensor::new(inp[1].shape(), gw)),
                    Some(Tensor::new(&[dn], gb)),
                ]
            }),
        )
    }
}
