//! Pointwise primitives and broadcasting binary arithmetic.

use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::tape::record;
use crate::tensor::{strides, validate_shape, Tensor};

/// Right-aligned broadcast of two shapes; size-1 axes stretch.
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(TensorError::shape(op, a, b)),
        };
    }
    Ok(out)
}

/// For every element of `out`, the flat index of the source element in a
/// tensor of shape `src` broadcast to `out`.
pub(crate) fn broadcast_index(src: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let pad = rank - src.len();
    let src_strides = strides(src);
    let mut eff = vec![0usize; rank];
    for i in 0..src.len() {
        eff[i + pad] = if src[i] == 1 { 0 } else { src_strides[i] };
    }
    let n: usize = out.iter().product();
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        idx.push(offset);
        for d in (0..rank).rev() {
            counter[d] += 1;
            offset += eff[d];
            if counter[d] < out[d] {
                break;
            }
            offset -= eff[d] * counter[d];
            counter[d] = 0;
        }
    }
    idx
}

enum Layout {
    Same,
    Broadcast(Arc<Vec<usize>>, Arc<Vec<usize>>),
}

fn binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
    da: impl Fn(f64, f64) -> f64 + 'static,
    db: impl Fn(f64, f64) -> f64 + 'static,
) -> Result<Tensor> {
    let (shape, layout) = if a.shape == b.shape {
        (a.shape.clone(), Layout::Same)
    } else {
        let shape = broadcast_shape(op, &a.shape, &b.shape)?;
        let ia = broadcast_index(&a.shape, &shape);
        let ib = broadcast_index(&b.shape, &shape);
        (shape, Layout::Broadcast(Arc::new(ia), Arc::new(ib)))
    };
    let (av, bv) = (Arc::clone(&a.data), Arc::clone(&b.data));
    let data: Vec<f64> = match &layout {
        Layout::Same => av.iter().zip(bv.iter()).map(|(&x, &y)| f(x, y)).collect(),
        Layout::Broadcast(ia, ib) => ia
            .iter()
            .zip(ib.iter())
            .map(|(&i, &j)| f(av[i], bv[j]))
            .collect(),
    };
    record(op, shape, data, &[a, b], move |g, needs| {
        let mut ga = needs[0].then(|| vec![0.0; av.len()]);
        let mut gb = needs[1].then(|| vec![0.0; bv.len()]);
        match &layout {
            Layout::Same => {
                for k in 0..g.len() {
                    let (x, y) = (av[k], bv[k]);
                    if let Some(ga) = &mut ga {
                        ga[k] = g[k] * da(x, y);
                    }
                    if let Some(gb) = &mut gb {
                        gb[k] = g[k] * db(x, y);
                    }
                }
            }
            Layout::Broadcast(ia, ib) => {
                for k in 0..g.len() {
                    let (i, j) = (ia[k], ib[k]);
                    let (x, y) = (av[i], bv[j]);
                    if let Some(ga) = &mut ga {
                        ga[i] += g[k] * da(x, y);
                    }
                    if let Some(gb) = &mut gb {
                        gb[j] += g[k] * db(x, y);
                    }
                }
            }
        }
        vec![ga, gb]
    })
}

/// Pointwise map whose derivative is expressed through input `x` and
/// output `y`.
fn unary(
    op: &'static str,
    x: &Tensor,
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64, f64) -> f64 + 'static,
) -> Result<Tensor> {
    let out: Vec<f64> = x.data.iter().map(|&v| f(v)).collect();
    let xs = Arc::clone(&x.data);
    let ys = Arc::new(out.clone());
    record(op, x.shape.clone(), out, &[x], move |g, _| {
        let gx = g
            .iter()
            .zip(xs.iter().zip(ys.iter()))
            .map(|(&g, (&x, &y))| g * df(x, y))
            .collect();
        vec![Some(gx)]
    })
}

pub const LEAKY_SLOPE: f64 = 0.2;

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        binary("add", self, other, |x, y| x + y, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        binary("sub", self, other, |x, y| x - y, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        binary("mul", self, other, |x, y| x * y, |_, y| y, |x, _| x)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        binary(
            "div",
            self,
            other,
            |x, y| x / y,
            |_, y| 1.0 / y,
            |x, y| -x / (y * y),
        )
    }

    pub fn neg(&self) -> Result<Tensor> {
        unary("neg", self, |x| -x, |_, _| -1.0)
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        unary("scale", self, |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        unary("add_scalar", self, |x| x + c, |_, _| 1.0)
    }

    /// Absolute value; the subgradient at 0 is 0.
    pub fn abs(&self) -> Result<Tensor> {
        unary("abs", self, f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn exp(&self) -> Result<Tensor> {
        unary("exp", self, f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Result<Tensor> {
        if let Some(bad) = self.data.iter().find(|&&v| v.is_nan() || v <= 0.0) {
            return Err(TensorError::Domain {
                op: "ln",
                msg: format!("non-positive input {bad}"),
            });
        }
        unary("ln", self, f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        if let Some(bad) = self.data.iter().find(|&&v| v.is_nan() || v < 0.0) {
            return Err(TensorError::Domain {
                op: "sqrt",
                msg: format!("negative input {bad}"),
            });
        }
        unary("sqrt", self, f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn tanh(&self) -> Result<Tensor> {
        unary("tanh", self, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        unary("sigmoid", self, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn softplus(&self) -> Result<Tensor> {
        unary(
            "softplus",
            self,
            |x| x.max(0.0) + (-x.abs()).exp().ln_1p(),
            |x, _| sigmoid(x),
        )
    }

    /// max(0, x); the subgradient at 0 is 0.
    pub fn relu(&self) -> Result<Tensor> {
        unary("relu", self, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// Leaky rectifier with negative-side slope 0.2.
    pub fn leaky_relu(&self) -> Result<Tensor> {
        unary(
            "leaky_relu",
            self,
            |x| if x > 0.0 { x } else { LEAKY_SLOPE * x },
            |x, _| if x > 0.0 { 1.0 } else { LEAKY_SLOPE },
        )
    }

    pub fn powf(&self, p: f64) -> Result<Tensor> {
        if p.fract() != 0.0 {
            if let Some(bad) = self.data.iter().find(|&&v| v < 0.0) {
                return Err(TensorError::Domain {
                    op: "powf",
                    msg: format!("negative base {bad} with fractional exponent {p}"),
                });
            }
        }
        unary("powf", self, |x| x.powf(p), move |x, _| p * x.powf(p - 1.0))
    }

    pub fn sin(&self) -> Result<Tensor> {
        unary("sin", self, f64::sin, |x, _| x.cos())
    }

    pub fn cos(&self) -> Result<Tensor> {
        unary("cos", self, f64::cos, |x, _| -x.sin())
    }

    /// Clamps into `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Tensor> {
        if lo > hi {
            return Err(TensorError::invalid("clamp", format!("lo {lo} > hi {hi}")));
        }
        unary(
            "clamp",
            self,
            |x| x.clamp(lo, hi),
            move |x, _| if x > lo && x < hi { 1.0 } else { 0.0 },
        )
    }

    /// Materializes the broadcast of `self` to `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        validate_shape("broadcast_to", shape)?;
        let out = broadcast_shape("broadcast_to", &self.shape, shape)?;
        if out != shape {
            return Err(TensorError::shape("broadcast_to", &self.shape, shape));
        }
        let idx = broadcast_index(&self.shape, shape);
        let data = idx.iter().map(|&i| self.data[i]).collect();
        let n = self.numel();
        record("broadcast_to", out, data, &[self], move |g, _| {
            let mut gx = vec![0.0; n];
            for (k, &i) in idx.iter().enumerate() {
                gx[i] += g[k];
            }
            vec![Some(gx)]
        })
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
