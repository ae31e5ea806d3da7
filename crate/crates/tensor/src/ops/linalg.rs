//! Matrix multiply and 2D convolution (cross-correlation, no kernel flip),
//! both lowered onto one GEMM kernel.

use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::tape::record;
use crate::tensor::Tensor;

/// Row-major operand view: `trans` reads the stored `rows x cols` buffer as
/// its transpose.
#[derive(Clone, Copy)]
struct Operand<'a> {
    data: &'a [f64],
    stored_cols: usize,
    trans: bool,
}

impl Operand<'_> {
    fn strides(&self) -> (isize, isize) {
        if self.trans {
            (1, self.stored_cols as isize)
        } else {
            (self.stored_cols as isize, 1)
        }
    }
}

/// `c[m x n] (+)= a[m x k] * b[k x n]`.
fn gemm(m: usize, k: usize, n: usize, a: Operand, b: Operand, c: &mut [f64], accumulate: bool) {
    assert!(a.data.len() >= m * k && b.data.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the assertion above guarantees every index the kernel touches
    // (row stride * (rows - 1) + col stride * (cols - 1)) lies in bounds for
    // both the plain and transposed layouts, and `c` does not alias `a`/`b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn plain(data: &[f64], cols: usize) -> Operand<'_> {
    Operand {
        data,
        stored_cols: cols,
        trans: false,
    }
}

fn transposed(data: &[f64], cols: usize) -> Operand<'_> {
    Operand {
        data,
        stored_cols: cols,
        trans: true,
    }
}

/// Geometry of one convolution call.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Unfolds one image `[cin, h, w]` into `[cin*k*k, oh*ow]`.
    fn im2col(&self, img: &[f64], out: &mut [f64]) {
        let l = self.cols();
        for ci in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = &mut out[((ci * self.k + ky) * self.k + kx) * l..][..l];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let dst = &mut row[oy * self.ow..][..self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &img[(ci * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Folds `[cin*k*k, oh*ow]` back, accumulating into `[cin, h, w]`.
    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let l = self.cols();
        for ci in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = &cols[((ci * self.k + ky) * self.k + kx) * l..][..l];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut img[(ci * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += row[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Tensor {
    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k, n) = match (&self.shape[..], &other.shape[..]) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(TensorError::shape("matmul", &self.shape, &other.shape)),
        };
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, plain(&self.data, k), plain(&other.data, n), &mut out, false);
        let (a, b) = (Arc::clone(&self.data), Arc::clone(&other.data));
        record("matmul", vec![m, n], out, &[self, other], move |g, needs| {
            let ga = needs[0].then(|| {
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, plain(g, n), transposed(&b, n), &mut ga, false);
                ga
            });
            let gb = needs[1].then(|| {
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, transposed(&a, k), plain(g, n), &mut gb, false);
                gb
            });
            vec![ga, gb]
        })
    }

    /// 2D cross-correlation of `self` (`[B, Cin, H, W]`) with `weight`
    /// (`[Cout, Cin, K, K]`), optional `bias` (`[Cout]`), zero padding.
    pub fn conv2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor> {
        let (b, cin, h, w) = match self.shape[..] {
            [b, c, h, w] => (b, c, h, w),
            _ => return Err(TensorError::shape("conv2d", &self.shape, &weight.shape)),
        };
        let (cout, k) = match weight.shape[..] {
            [co, ci, kh, kw] if ci == cin && kh == kw => (co, kh),
            _ => return Err(TensorError::shape("conv2d", &self.shape, &weight.shape)),
        };
        if let Some(bias) = bias {
            if bias.shape != [cout] {
                return Err(TensorError::shape("conv2d", &weight.shape, &bias.shape));
            }
        }
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return Err(TensorError::invalid(
                "conv2d",
                format!("kernel {k} stride {stride} pad {pad} does not fit {h}x{w}"),
            ));
        }
        let geom = ConvGeom {
            cin,
            h,
            w,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        };
        let (kk, l) = (geom.rows(), geom.cols());
        let mut cols = vec![0.0; b * kk * l];
        let mut out = vec![0.0; b * cout * l];
        for bi in 0..b {
            let col = &mut cols[bi * kk * l..][..kk * l];
            geom.im2col(&self.data[bi * cin * h * w..][..cin * h * w], col);
            let dst = &mut out[bi * cout * l..][..cout * l];
            if let Some(bias) = bias {
                for (co, row) in dst.chunks_exact_mut(l).enumerate() {
                    row.fill(bias.data[co]);
                }
            }
            gemm(cout, kk, l, plain(&weight.data, kk), plain(col, l), dst, bias.is_some());
        }
        let cols = Arc::new(cols);
        let wdata = Arc::clone(&weight.data);
        let mut inputs = vec![self, weight];
        if let Some(bias) = bias {
            inputs.push(bias);
        }
        let has_bias = bias.is_some();
        let shape = vec![b, cout, geom.oh, geom.ow];
        record("conv2d", shape, out, &inputs, move |g, needs| {
            let mut gx = needs[0].then(|| vec![0.0; b * cin * h * w]);
            let mut gw = needs[1].then(|| vec![0.0; cout * kk]);
            let mut gb = (has_bias && needs[2]).then(|| vec![0.0; cout]);
            let mut dcol = vec![0.0; if gx.is_some() { kk * l } else { 0 }];
            for bi in 0..b {
                let gy = &g[bi * cout * l..][..cout * l];
                if let Some(gw) = &mut gw {
                    let col = &cols[bi * kk * l..][..kk * l];
                    gemm(cout, l, kk, plain(gy, l), transposed(col, l), gw, true);
                }
                if let Some(gb) = &mut gb {
                    for (co, row) in gy.chunks_exact(l).enumerate() {
                        gb[co] += row.iter().sum::<f64>();
                    }
                }
                if let Some(gx) = &mut gx {
                    gemm(kk, cout, l, transposed(&wdata, kk), plain(gy, l), &mut dcol, false);
                    geom.col2im(&dcol, &mut gx[bi * cin * h * w..][..cin * h * w]);
                }
            }
            let mut grads = vec![gx, gw];
            if has_bias {
                grads.push(gb);
            }
            grads
        })
    }
}
