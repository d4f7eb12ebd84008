//! Dense loops shared by forward and backward rules.

/// out[m,n] += a[m,k] · b[k,n]
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Dot product with four independent partial sums so the adds can pipeline.
#[inline]
pub(crate) fn dot(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len());
    let (x, y) = (&x[..n], &y[..n]);
    let mut acc = [0.0; 4];
    let mut xc = x.chunks_exact(4);
    let mut yc = y.chunks_exact(4);
    for (a, b) in (&mut xc).zip(&mut yc) {
        acc[0] += a[0] * b[0];
        acc[1] += a[1] * b[1];
        acc[2] += a[2] * b[2];
        acc[3] += a[3] * b[3];
    }
    let mut tail = 0.0;
    for (a, b) in xc.remainder().iter().zip(yc.remainder()) {
        tail += a * b;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// out[m,k] += g[m,n] · b[k,n]ᵀ
pub(crate) fn matmul_a_bt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] += dot(grow, &b[p * n..(p + 1) * n]);
        }
    }
}

/// out[k,n] += a[m,k]ᵀ · g[m,n]
pub(crate) fn matmul_at_b_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub len: usize,
    pub kernel: usize,
    pub groups: usize,
}

impl ConvDims {
    fn per_group(&self) -> (usize, usize) {
        (self.c_in / self.groups, self.c_out / self.groups)
    }
}

/// Range of output times `t` for which `t + kk - pad` lies inside [0, len).
#[inline]
fn valid_range(kk: usize, pad: usize, len: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kk);
    let hi = (len + pad).saturating_sub(kk).min(len);
    (lo, hi.max(lo))
}

/// Same-padded grouped cross-correlation.
pub(crate) fn conv1d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, d: &ConvDims) -> Vec<f64> {
    let (cig, cog) = d.per_group();
    let pad = (d.kernel - 1) / 2;
    let t = d.len;
    let mut out = vec![0.0; d.batch * d.c_out * t];
    for b in 0..d.batch {
        for oc in 0..d.c_out {
            let g = oc / cog;
            let orow = &mut out[(b * d.c_out + oc) * t..(b * d.c_out + oc + 1) * t];
            if let Some(bias) = bias {
                orow.iter_mut().for_each(|o| *o = bias[oc]);
            }
            for icg in 0..cig {
                let ic = g * cig + icg;
                let xrow = &x[(b * d.c_in + ic) * t..(b * d.c_in + ic + 1) * t];
                let wrow = &w[(oc * cig + icg) * d.kernel..(oc * cig + icg + 1) * d.kernel];
                for (kk, &wv) in wrow.iter().enumerate() {
                    let (lo, hi) = valid_range(kk, pad, t);
                    let shift = kk as isize - pad as isize;
                    for tt in lo..hi {
                        orow[tt] += wv * xrow[(tt as isize + shift) as usize];
                    }
                }
            }
        }
    }
    out
}

/// Accumulates input, weight and bias gradients of `conv1d_forward`.
pub(crate) fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    d: &ConvDims,
    mut gx: Option<&mut [f64]>,
    mut gw: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
) {
    let (cig, cog) = d.per_group();
    let pad = (d.kernel - 1) / 2;
    let t = d.len;
    for b in 0..d.batch {
        for oc in 0..d.c_out {
            let gr = oc / cog;
            let grow = &g[(b * d.c_out + oc) * t..(b * d.c_out + oc + 1) * t];
            for icg in 0..cig {
                let ic = gr * cig + icg;
                let xoff = (b * d.c_in + ic) * t;
                let woff = (oc * cig + icg) * d.kernel;
                for kk in 0..d.kernel {
                    let (lo, hi) = valid_range(kk, pad, t);
                    let shift = kk as isize - pad as isize;
                    if hi == lo {
                        continue;
                    }
                    if let Some(gw) = gw.as_deref_mut() {
                        let xs = (xoff as isize + lo as isize + shift) as usize;
                        gw[woff + kk] += dot(&grow[lo..hi], &x[xs..xs + (hi - lo)]);
                    }
                    if let Some(gx) = gx.as_deref_mut() {
                        let wv = w[woff + kk];
                        for tt in lo..hi {
                            gx[xoff + (tt as isize + shift) as usize] += wv * grow[tt];
                        }
                    }
                }
            }
        }
    }
    if let Some(gb) = gb {
        for b in 0..d.batch {
            for oc in 0..d.c_out {
                let grow = &g[(b * d.c_out + oc) * t..(b * d.c_out + oc + 1) * t];
                gb[oc] += grow.iter().sum::<f64>();
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + eˣ) without overflow.
#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
