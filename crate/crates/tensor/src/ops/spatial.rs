//! Image-space resampling on `[batch, channel, height, width]` tensors:
//! up/down-sampling and bilinear gather / scatter-add at fractional
//! coordinates.

use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::tape::record;
use crate::tensor::Tensor;

fn dims4(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match t.shape[..] {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(TensorError::invalid(
            op,
            format!("expected a 4-axis tensor, got {:?}", t.shape),
        )),
    }
}

/// The four integer neighbours of `(x, y)` with their bilinear weights and
/// the weights' partial derivatives w.r.t. `x` and `y`. Neighbours outside
/// `[0, w) x [0, h)` are reported with `None` so callers drop them.
#[derive(Clone, Copy)]
pub(crate) struct Footprint {
    pub idx: [Option<usize>; 4],
    pub wt: [f64; 4],
    pub dx: [f64; 4],
    pub dy: [f64; 4],
}

pub(crate) fn footprint(x: f64, y: f64, h: usize, w: usize) -> Footprint {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let corners = [(x0, y0), (x0 + 1, y0), (x0, y0 + 1), (x0 + 1, y0 + 1)];
    let wt = [
        (1.0 - fx) * (1.0 - fy),
        fx * (1.0 - fy),
        (1.0 - fx) * fy,
        fx * fy,
    ];
    let dx = [-(1.0 - fy), 1.0 - fy, -fy, fy];
    let dy = [-(1.0 - fx), -fx, 1.0 - fx, fx];
    let mut idx = [None; 4];
    for (k, &(cx, cy)) in corners.iter().enumerate() {
        if cx >= 0 && cy >= 0 && (cx as usize) < w && (cy as usize) < h {
            idx[k] = Some(cy as usize * w + cx as usize);
        }
    }
    Footprint { idx, wt, dx, dy }
}

fn check_coords(op: &'static str, u: &Tensor, v: &Tensor, b: usize) -> Result<usize> {
    if u.shape != v.shape || u.rank() != 2 || u.shape[0] != b {
        return Err(TensorError::shape(op, &u.shape, &v.shape));
    }
    if u.data.iter().chain(v.data.iter()).any(|c| !c.is_finite()) {
        return Err(TensorError::Domain {
            op,
            msg: "non-finite sample coordinate".into(),
        });
    }
    Ok(u.shape[1])
}

impl Tensor {
    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Tensor> {
        let (b, c, h, w) = dims4("upsample_nearest", self)?;
        if factor == 0 {
            return Err(TensorError::invalid("upsample_nearest", "factor must be positive"));
        }
        let (oh, ow) = (h * factor, w * factor);
        let planes = b * c;
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            let src = &self.data[p * h * w..][..h * w];
            let dst = &mut out[p * oh * ow..][..oh * ow];
            for y in 0..oh {
                for x in 0..ow {
                    dst[y * ow + x] = src[(y / factor) * w + x / factor];
                }
            }
        }
        record("upsample_nearest", vec![b, c, oh, ow], out, &[self], move |g, _| {
            let mut gx = vec![0.0; planes * h * w];
            for p in 0..planes {
                let src = &g[p * oh * ow..][..oh * ow];
                let dst = &mut gx[p * h * w..][..h * w];
                for y in 0..oh {
                    for x in 0..ow {
                        dst[(y / factor) * w + x / factor] += src[y * ow + x];
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// Bilinear upsampling by an integer factor with half-pixel centres and
    /// edge clamping.
    pub fn upsample_bilinear(&self, factor: usize) -> Result<Tensor> {
        let (b, c, h, w) = dims4("upsample_bilinear", self)?;
        if factor == 0 {
            return Err(TensorError::invalid("upsample_bilinear", "factor must be positive"));
        }
        let (oh, ow) = (h * factor, w * factor);
        let axis = |o: usize, n: usize| -> (usize, usize, f64) {
            let s = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, s - i0 as f64)
        };
        let ys: Vec<_> = (0..oh).map(|y| axis(y, h)).collect();
        let xs: Vec<_> = (0..ow).map(|x| axis(x, w)).collect();
        let planes = b * c;
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            let src = &self.data[p * h * w..][..h * w];
            for (y, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                    out[p * oh * ow + y * ow + x] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        record("upsample_bilinear", vec![b, c, oh, ow], out, &[self], move |g, _| {
            let mut gx = vec![0.0; planes * h * w];
            for p in 0..planes {
                let dst = &mut gx[p * h * w..][..h * w];
                for (y, &(y0, y1, fy)) in ys.iter().enumerate() {
                    for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
                        let gv = g[p * oh * ow + y * ow + x];
                        dst[y0 * w + x0] += gv * (1.0 - fx) * (1.0 - fy);
                        dst[y0 * w + x1] += gv * fx * (1.0 - fy);
                        dst[y1 * w + x0] += gv * (1.0 - fx) * fy;
                        dst[y1 * w + x1] += gv * fx * fy;
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// Mean over non-overlapping `k x k` windows; extents must divide.
    pub fn avg_pool2d(&self, k: usize) -> Result<Tensor> {
        let (b, c, h, w) = dims4("avg_pool2d", self)?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(TensorError::invalid(
                "avg_pool2d",
                format!("window {k} does not tile {h}x{w}"),
            ));
        }
        let (oh, ow) = (h / k, w / k);
        let planes = b * c;
        let norm = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            let src = &self.data[p * h * w..][..h * w];
            for y in 0..h {
                for x in 0..w {
                    out[p * oh * ow + (y / k) * ow + x / k] += src[y * w + x] * norm;
                }
            }
        }
        record("avg_pool2d", vec![b, c, oh, ow], out, &[self], move |g, _| {
            let mut gx = vec![0.0; planes * h * w];
            for p in 0..planes {
                for y in 0..h {
                    for x in 0..w {
                        gx[p * h * w + y * w + x] = g[p * oh * ow + (y / k) * ow + x / k] * norm;
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// Mean over both spatial axes, keeping them as size 1.
    pub fn global_avg_pool(&self) -> Result<Tensor> {
        let (b, c, h, w) = dims4("global_avg_pool", self)?;
        self.reshape(&[b, c, h * w])?.mean_axis(2, true)?.reshape(&[b, c, 1, 1])
    }

    /// Reads `self` (`[B, C, H, W]`) at fractional pixel coordinates
    /// `u` (column) and `v` (row), each `[B, N]`, giving `[B, C, N]`.
    /// Differentiable in the image and in the coordinates; neighbours
    /// outside the image contribute zero.
    pub fn gather_bilinear(&self, u: &Tensor, v: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = dims4("gather_bilinear", self)?;
        let n = check_coords("gather_bilinear", u, v, b)?;
        let fps: Arc<Vec<Footprint>> = Arc::new(
            u.data
                .iter()
                .zip(v.data.iter())
                .map(|(&x, &y)| footprint(x, y, h, w))
                .collect(),
        );
        let mut out = vec![0.0; b * c * n];
        for bi in 0..b {
            for ci in 0..c {
                let plane = &self.data[(bi * c + ci) * h * w..][..h * w];
                for j in 0..n {
                    let fp = &fps[bi * n + j];
                    out[(bi * c + ci) * n + j] = (0..4)
                        .filter_map(|k| fp.idx[k].map(|i| fp.wt[k] * plane[i]))
                        .sum();
                }
            }
        }
        let img = Arc::clone(&self.data);
        record("gather_bilinear", vec![b, c, n], out, &[self, u, v], move |g, needs| {
            let mut gimg = needs[0].then(|| vec![0.0; b * c * h * w]);
            let mut gu = needs[1].then(|| vec![0.0; b * n]);
            let mut gv = needs[2].then(|| vec![0.0; b * n]);
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * h * w;
                    for j in 0..n {
                        let fp = &fps[bi * n + j];
                        let gout = g[(bi * c + ci) * n + j];
                        for k in 0..4 {
                            let Some(i) = fp.idx[k] else { continue };
                            if let Some(gimg) = &mut gimg {
                                gimg[base + i] += gout * fp.wt[k];
                            }
                            let val = img[base + i];
                            if let Some(gu) = &mut gu {
                                gu[bi * n + j] += gout * fp.dx[k] * val;
                            }
                            if let Some(gv) = &mut gv {
                                gv[bi * n + j] += gout * fp.dy[k] * val;
                            }
                        }
                    }
                }
            }
            vec![gimg, gu, gv]
        })
    }

    /// Adjoint of [`Tensor::gather_bilinear`]: adds `self` (`[B, C, N]`)
    /// into an `h x w` image at fractional coordinates `u`, `v` (`[B, N]`)
    /// with bilinear weights. Differentiable in the values and the
    /// coordinates.
    pub fn scatter_bilinear(&self, u: &Tensor, v: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let (b, c, n) = match self.shape[..] {
            [b, c, n] => (b, c, n),
            _ => {
                return Err(TensorError::invalid(
                    "scatter_bilinear",
                    format!("expected [B, C, N] values, got {:?}", self.shape),
                ))
            }
        };
        if h == 0 || w == 0 {
            return Err(TensorError::invalid("scatter_bilinear", "empty target image"));
        }
        if check_coords("scatter_bilinear", u, v, b)? != n {
            return Err(TensorError::shape("scatter_bilinear", &self.shape, &u.shape));
        }
        let fps: Arc<Vec<Footprint>> = Arc::new(
            u.data
                .iter()
                .zip(v.data.iter())
                .map(|(&x, &y)| footprint(x, y, h, w))
                .collect(),
        );
        let mut out = vec![0.0; b * c * h * w];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * h * w;
                for j in 0..n {
                    let fp = &fps[bi * n + j];
                    let val = self.data[(bi * c + ci) * n + j];
                    for k in 0..4 {
                        if let Some(i) = fp.idx[k] {
                            out[base + i] += fp.wt[k] * val;
                        }
                    }
                }
            }
        }
        let vals = Arc::clone(&self.data);
        record("scatter_bilinear", vec![b, c, h, w], out, &[self, u, v], move |g, needs| {
            let mut gval = needs[0].then(|| vec![0.0; b * c * n]);
            let mut gu = needs[1].then(|| vec![0.0; b * n]);
            let mut gv = needs[2].then(|| vec![0.0; b * n]);
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * h * w;
                    for j in 0..n {
                        let fp = &fps[bi * n + j];
                        let val = vals[(bi * c + ci) * n + j];
                        let mut acc = 0.0;
                        let mut acc_u = 0.0;
                        let mut acc_v = 0.0;
                        for k in 0..4 {
                            let Some(i) = fp.idx[k] else { continue };
                            acc += fp.wt[k] * g[base + i];
                            acc_u += fp.dx[k] * g[base + i];
                            acc_v += fp.dy[k] * g[base + i];
                        }
                        if let Some(gval) = &mut gval {
                            gval[(bi * c + ci) * n + j] = acc;
                        }
                        if let Some(gu) = &mut gu {
                            gu[bi * n + j] += acc_u * val;
                        }
                        if let Some(gv) = &mut gv {
                            gv[bi * n + j] += acc_v * val;
                        }
                    }
                }
            }
            vec![gval, gu, gv]
        })
    }
}
