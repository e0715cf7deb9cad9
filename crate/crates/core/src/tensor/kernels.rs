//! Raw slice kernels behind the tensor ops. Shapes are validated by callers.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// No padding: output side `(H - k) / stride + 1`.
    #[default]
    Valid,
    /// Symmetric zero padding of `k - 1` in total (the extra row/column goes
    /// to the bottom/right for even kernels): output side `ceil(H / stride)`.
    Same,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Max,
    Avg,
}

/// Resolved sizes of one NHWC convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub k: usize,
    pub f: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], kernel: &[usize], stride: usize, padding: Padding) -> Result<Self> {
        if x.len() != 4 {
            return Err(shape_err!("conv2d input must be [N,H,W,C], got {x:?}"));
        }
        if kernel.len() != 4 || kernel[0] != kernel[1] {
            return Err(shape_err!("conv2d kernel must be [k,k,C,F], got {kernel:?}"));
        }
        if stride == 0 {
            return Err(shape_err!("conv2d stride must be at least 1"));
        }
        let (n, h, w, c) = (x[0], x[1], x[2], x[3]);
        let (k, kc, f) = (kernel[0], kernel[2], kernel[3]);
        if kc != c {
            return Err(shape_err!(
                "conv2d channel mismatch: input has {c} channels, kernel expects {kc}"
            ));
        }
        let (pad_top, pad_left, ph, pw) = match padding {
            Padding::Valid => (0, 0, h, w),
            Padding::Same => ((k - 1) / 2, (k - 1) / 2, h + k - 1, w + k - 1),
        };
        if k > ph || k > pw {
            return Err(shape_err!("conv2d kernel {k}x{k} larger than padded input {ph}x{pw}"));
        }
        Ok(Self {
            n,
            h,
            w,
            c,
            k,
            f,
            stride,
            pad_top,
            pad_left,
            oh: (ph - k) / stride + 1,
            ow: (pw - k) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.k * self.k * self.c
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.oh, self.ow, self.f]
    }
}

/// `c[m,n] = beta * c + a[m,k] · b[k,n]` with arbitrary element strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
        assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    }
    assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the asserts above bound every element the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Row-major `[m,k] x [k,n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, (k, 1), b, (n, 1), 0.0, &mut c, (n, 1));
    c
}

/// Gradients of `c = a · b` given `dc`.
pub fn matmul_backward(
    a: &[f64],
    b: &[f64],
    dc: &[f64],
    (m, k, n): (usize, usize, usize),
    need_da: bool,
    need_db: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let da = need_da.then(|| {
        // da = dc · bᵀ
        let mut da = vec![0.0; m * k];
        gemm(m, n, k, dc, (n, 1), b, (1, n), 0.0, &mut da, (k, 1));
        da
    });
    let db = need_db.then(|| {
        // db = aᵀ · dc
        let mut db = vec![0.0; k * n];
        gemm(k, m, n, a, (1, k), dc, (n, 1), 0.0, &mut db, (n, 1));
        db
    });
    (da, db)
}

/// Unroll one image into `[oh*ow, k*k*c]` patches, row order `(ky, kx, c)`.
fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let plen = g.patch_len();
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &mut cols[(oy * g.ow + ox) * plen..][..plen];
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                for kx in 0..g.k {
                    let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                    let dst = &mut row[(ky * g.k + kx) * g.c..][..g.c];
                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                        dst.fill(0.0);
                    } else {
                        let src = (iy as usize * g.w + ix as usize) * g.c;
                        dst.copy_from_slice(&x[src..src + g.c]);
                    }
                }
            }
        }
    }
}

/// Scatter-add patch gradients back into one image.
fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let plen = g.patch_len();
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &cols[(oy * g.ow + ox) * plen..][..plen];
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let dst = (iy as usize * g.w + ix as usize) * g.c;
                    let src = &row[(ky * g.k + kx) * g.c..][..g.c];
                    for (d, s) in dx[dst..dst + g.c].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(x: &[f64], kernel: &[f64], g: &ConvGeom) -> Vec<f64> {
    let in_len = g.h * g.w * g.c;
    let out_len = g.positions() * g.f;
    let plen = g.patch_len();
    let mut out = vec![0.0; g.n * out_len];
    out.par_chunks_mut(out_len)
        .zip(x.par_chunks(in_len))
        .for_each(|(o, xi)| {
            let mut cols = vec![0.0; g.positions() * plen];
            im2col(xi, g, &mut cols);
            gemm(
                g.positions(),
                plen,
                g.f,
                &cols,
                (plen, 1),
                kernel,
                (g.f, 1),
                0.0,
                o,
                (g.f, 1),
            );
        });
    out
}

/// Returns `(dx, dkernel)`; each is computed only when requested.
pub fn conv2d_backward(
    x: &[f64],
    kernel: &[f64],
    dout: &[f64],
    g: &ConvGeom,
    need_dx: bool,
    need_dk: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let in_len = g.h * g.w * g.c;
    let out_len = g.positions() * g.f;
    let plen = g.patch_len();
    let klen = plen * g.f;

    // Per-sample partial kernel gradients, reduced afterwards in sample order
    // so the result does not depend on the thread count.
    let per_sample: Vec<(Vec<f64>, Vec<f64>)> = x
        .par_chunks(in_len)
        .zip(dout.par_chunks(out_len))
        .map(|(xi, doi)| {
            let mut dk = Vec::new();
            if need_dk {
                let mut cols = vec![0.0; g.positions() * plen];
                im2col(xi, g, &mut cols);
                dk = vec![0.0; klen];
                // dk = colsᵀ · dout
                gemm(
                    plen,
                    g.positions(),
                    g.f,
                    &cols,
                    (1, plen),
                    doi,
                    (g.f, 1),
                    0.0,
                    &mut dk,
                    (g.f, 1),
                );
            }
            let mut dxi = Vec::new();
            if need_dx {
                let mut dcols = vec![0.0; g.positions() * plen];
                // dcols = dout · kernelᵀ
                gemm(
                    g.positions(),
                    g.f,
                    plen,
                    doi,
                    (g.f, 1),
                    kernel,
                    (1, g.f),
                    0.0,
                    &mut dcols,
                    (plen, 1),
                );
                dxi = vec![0.0; in_len];
                col2im(&dcols, g, &mut dxi);
            }
            (dxi, dk)
        })
        .collect();

    let dx = need_dx.then(|| {
        let mut dx = Vec::with_capacity(g.n * in_len);
        for (dxi, _) in &per_sample {
            dx.extend_from_slice(dxi);
        }
        dx
    });
    let dk = need_dk.then(|| {
        let mut dk = vec![0.0; klen];
        for (_, part) in &per_sample {
            for (d, p) in dk.iter_mut().zip(part) {
                *d += p;
            }
        }
        dk
    });
    (dx, dk)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub p: usize,
    pub oh: usize,
    pub ow: usize,
}

impl PoolGeom {
    pub fn new(x: &[usize], p: usize) -> Result<Self> {
        if x.len() != 4 {
            return Err(shape_err!("pool2d input must be [N,H,W,C], got {x:?}"));
        }
        if p == 0 {
            return Err(shape_err!("pool window must be at least 1"));
        }
        let (n, h, w, c) = (x[0], x[1], x[2], x[3]);
        if p > h || p > w {
            return Err(shape_err!("pool window {p} larger than input {h}x{w}"));
        }
        Ok(Self {
            n,
            h,
            w,
            c,
            p,
            oh: h / p,
            ow: w / p,
        })
    }
}

/// Non-overlapping `p x p` pooling with stride `p`; trailing rows/columns that
/// do not fill a window are dropped. Max mode also returns the flat input
/// index of each winner (first occurrence on ties).
pub fn pool2d_forward(x: &[f64], g: &PoolGeom, mode: PoolMode) -> (Vec<f64>, Vec<usize>) {
    let mut out = vec![0.0; g.n * g.oh * g.ow * g.c];
    let mut arg = match mode {
        PoolMode::Max => vec![0usize; out.len()],
        PoolMode::Avg => Vec::new(),
    };
    let inv = 1.0 / (g.p * g.p) as f64;
    for n in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                for c in 0..g.c {
                    let o = ((n * g.oh + oy) * g.ow + ox) * g.c + c;
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    let mut sum = 0.0;
                    for dy in 0..g.p {
                        for dx in 0..g.p {
                            let i = ((n * g.h + oy * g.p + dy) * g.w + ox * g.p + dx) * g.c + c;
                            let v = x[i];
                            sum += v;
                            if v > best {
                                best = v;
                                best_i = i;
                            }
                        }
                    }
                    match mode {
                        PoolMode::Max => {
                            out[o] = best;
                            arg[o] = best_i;
                        }
                        PoolMode::Avg => out[o] = sum * inv,
                    }
                }
            }
        }
    }
    (out, arg)
}

pub fn pool2d_backward(dout: &[f64], g: &PoolGeom, mode: PoolMode, argmax: &[usize]) -> Vec<f64> {
    let mut dx = vec![0.0; g.n * g.h * g.w * g.c];
    match mode {
        PoolMode::Max => {
            for (o, &i) in argmax.iter().enumerate() {
                dx[i] += dout[o];
            }
        }
        PoolMode::Avg => {
            let inv = 1.0 / (g.p * g.p) as f64;
            for n in 0..g.n {
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        for c in 0..g.c {
                            let d = dout[((n * g.oh + oy) * g.ow + ox) * g.c + c] * inv;
                            for dy in 0..g.p {
                                for ddx in 0..g.p {
                                    dx[((n * g.h + oy * g.p + dy) * g.w + ox * g.p + ddx) * g.c + c] += d;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}
