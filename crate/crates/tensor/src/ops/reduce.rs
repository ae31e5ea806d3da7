//! Reductions and softmax.

use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::tape::record;
use crate::tensor::{split_axis, Tensor};

impl Tensor {
    pub fn sum(&self) -> Result<Tensor> {
        let total = self.data.iter().sum();
        let n = self.numel();
        record("sum", vec![1], vec![total], &[self], move |g, _| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&self) -> Result<Tensor> {
        let n = self.numel();
        let total: f64 = self.data.iter().sum();
        record("mean", vec![1], vec![total / n as f64], &[self], move |g, _| {
            vec![Some(vec![g[0] / n as f64; n])]
        })
    }

    /// Largest element; the gradient goes to the first maximizer.
    pub fn max(&self) -> Result<Tensor> {
        let (arg, best) = argmax(self.data.iter().copied());
        let n = self.numel();
        record("max", vec![1], vec![best], &[self], move |g, _| {
            let mut gx = vec![0.0; n];
            gx[arg] = g[0];
            vec![Some(gx)]
        })
    }

    pub fn sum_axis(&self, axis: isize, keepdim: bool) -> Result<Tensor> {
        self.reduce_axis("sum_axis", axis, keepdim, false)
    }

    pub fn mean_axis(&self, axis: isize, keepdim: bool) -> Result<Tensor> {
        self.reduce_axis("mean_axis", axis, keepdim, true)
    }

    fn reduce_axis(
        &self,
        op: &'static str,
        axis: isize,
        keepdim: bool,
        average: bool,
    ) -> Result<Tensor> {
        let ax = self.checked_axis(op, axis)?;
        let (outer, len, inner) = split_axis(&self.shape, ax);
        let scale = if average { 1.0 / len as f64 } else { 1.0 };
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &self.data[(o * len + l) * inner..][..inner];
                let dst = &mut out[o * inner..][..inner];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        if average {
            out.iter_mut().for_each(|v| *v *= scale);
        }
        let shape = reduced_shape(&self.shape, ax, keepdim);
        record(op, shape, out, &[self], move |g, _| {
            let mut gx = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for l in 0..len {
                    let dst = &mut gx[(o * len + l) * inner..][..inner];
                    let src = &g[o * inner..][..inner];
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d = s * scale);
                }
            }
            vec![Some(gx)]
        })
    }

    /// Per-axis maximum; gradient to the first maximizer along the axis.
    pub fn max_axis(&self, axis: isize, keepdim: bool) -> Result<Tensor> {
        let ax = self.checked_axis("max_axis", axis)?;
        let (outer, len, inner) = split_axis(&self.shape, ax);
        let mut out = vec![0.0; outer * inner];
        let mut args = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let (arg, best) =
                    argmax((0..len).map(|l| self.data[(o * len + l) * inner + i]));
                out[o * inner + i] = best;
                args[o * inner + i] = arg;
            }
        }
        let shape = reduced_shape(&self.shape, ax, keepdim);
        record("max_axis", shape, out, &[self], move |g, _| {
            let mut gx = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let k = o * inner + i;
                    gx[(o * len + args[k]) * inner + i] = g[k];
                }
            }
            vec![Some(gx)]
        })
    }

    /// Softmax along `axis`.
    pub fn softmax(&self, axis: isize) -> Result<Tensor> {
        let ax = self.checked_axis("softmax", axis)?;
        let (outer, len, inner) = split_axis(&self.shape, ax);
        let mut out = vec![0.0; self.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let m = (0..len).map(|l| self.data[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in 0..len {
                    let e = (self.data[at(l)] - m).exp();
                    out[at(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    out[at(l)] /= z;
                }
            }
        }
        let y = Arc::new(out.clone());
        record("softmax", self.shape.clone(), out, &[self], move |g, _| {
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let dot: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                    for l in 0..len {
                        gx[at(l)] = y[at(l)] * (g[at(l)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    pub(crate) fn checked_axis(&self, op: &'static str, axis: isize) -> Result<usize> {
        let rank = self.rank() as isize;
        if axis >= rank || axis < -rank {
            return Err(TensorError::invalid(
                op,
                format!("axis {axis} out of range for shape {:?}", self.shape),
            ));
        }
        Ok(self.axis_index(axis))
    }
}

fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut s = shape.to_vec();
    if keepdim || s.len() == 1 {
        s[axis] = 1;
    } else {
        s.remove(axis);
    }
    s
}

fn argmax(values: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut best = f64::NEG_INFINITY;
    let mut arg = 0;
    for (i, v) in values.enumerate() {
        if v > best || (i == 0 && v.is_nan()) {
            best = v;
            arg = i;
        }
    }
    (arg, best)
}
