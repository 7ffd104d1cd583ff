//! Raw loops behind the graph primitives. Layouts are row-major; images are
//! NHWC and convolution weights are `[kh, kw, c_in, c_out]`.

/// `out[r, c] += a[r, k] * b[k, c]`.
pub fn gemm(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let orow = &mut out[i * c..(i + 1) * c];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * c..(p + 1) * c];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[r, k] += g[r, c] * b[k, c]` (gradient w.r.t. the left factor).
pub fn gemm_nt(g: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let grow = &g[i * c..(i + 1) * c];
        for p in 0..k {
            let brow = &b[p * c..(p + 1) * c];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k, c] += a[r, k] * g[r, c]` (gradient w.r.t. the right factor).
pub fn gemm_tn(a: &[f64], g: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let grow = &g[i * c..(i + 1) * c];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * c..(p + 1) * c];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub kh: usize,
    pub kw: usize,
    pub c_out: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    /// Input pixel feeding output `(oh, ow)` through kernel tap `(ki, kj)`.
    #[inline]
    fn src(&self, oh: usize, ow: usize, ki: usize, kj: usize) -> Option<(usize, usize)> {
        let ih = (oh * self.stride + ki).checked_sub(self.pad)?;
        let iw = (ow * self.stride + kj).checked_sub(self.pad)?;
        (ih < self.h && iw < self.w).then_some((ih, iw))
    }
}

pub fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (oh_n, ow_n) = (g.out_h(), g.out_w());
    let mut out = vec![0.0; g.n * oh_n * ow_n * g.c_out];
    for n in 0..g.n {
        for oh in 0..oh_n {
            for ow in 0..ow_n {
                let o0 = ((n * oh_n + oh) * ow_n + ow) * g.c_out;
                let orow = &mut out[o0..o0 + g.c_out];
                if let Some(b) = bias {
                    orow.copy_from_slice(b);
                }
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let Some((ih, iw)) = g.src(oh, ow, ki, kj) else {
                            continue;
                        };
                        let x0 = ((n * g.h + ih) * g.w + iw) * g.c_in;
                        let w0 = (ki * g.kw + kj) * g.c_in * g.c_out;
                        gemm(
                            &x[x0..x0 + g.c_in],
                            &w[w0..w0 + g.c_in * g.c_out],
                            orow,
                            1,
                            g.c_in,
                            g.c_out,
                        );
                    }
                }
            }
        }
    }
    out
}

/// Accumulates input, weight and bias gradients for one convolution.
pub fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
) {
    let (oh_n, ow_n) = (g.out_h(), g.out_w());
    for n in 0..g.n {
        for oh in 0..oh_n {
            for ow in 0..ow_n {
                let o0 = ((n * oh_n + oh) * ow_n + ow) * g.c_out;
                let grow = &dout[o0..o0 + g.c_out];
                if let Some(db) = db.as_deref_mut() {
                    for (d, &v) in db.iter_mut().zip(grow) {
                        *d += v;
                    }
                }
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let Some((ih, iw)) = g.src(oh, ow, ki, kj) else {
                            continue;
                        };
                        let x0 = ((n * g.h + ih) * g.w + iw) * g.c_in;
                        let w0 = (ki * g.kw + kj) * g.c_in * g.c_out;
                        let wslab = &w[w0..w0 + g.c_in * g.c_out];
                        if let Some(dx) = dx.as_deref_mut() {
                            gemm_nt(grow, wslab, &mut dx[x0..x0 + g.c_in], 1, g.c_in, g.c_out);
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            gemm_tn(
                                &x[x0..x0 + g.c_in],
                                grow,
                                &mut dw[w0..w0 + g.c_in * g.c_out],
                                1,
                                g.c_in,
                                g.c_out,
                            );
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub size: usize,
    pub stride: usize,
}

impl PoolGeom {
    pub fn out_h(&self) -> usize {
        (self.h - self.size) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w - self.size) / self.stride + 1
    }
}

/// Returns the pooled values and, per output element, the flat index of the
/// winning input element (first maximum in scan order).
pub fn maxpool2d_forward(g: &PoolGeom, x: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let (oh_n, ow_n) = (g.out_h(), g.out_w());
    let len = g.n * oh_n * ow_n * g.c;
    let mut out = vec![f64::NEG_INFINITY; len];
    let mut arg = vec![0usize; len];
    for n in 0..g.n {
        for oh in 0..oh_n {
            for ow in 0..ow_n {
                let o0 = ((n * oh_n + oh) * ow_n + ow) * g.c;
                for ki in 0..g.size {
                    for kj in 0..g.size {
                        let ih = oh * g.stride + ki;
                        let iw = ow * g.stride + kj;
                        let x0 = ((n * g.h + ih) * g.w + iw) * g.c;
                        for c in 0..g.c {
                            if x[x0 + c] > out[o0 + c] {
                                out[o0 + c] = x[x0 + c];
                                arg[o0 + c] = x0 + c;
                            }
                        }
                    }
                }
            }
        }
    }
    (out, arg)
}
