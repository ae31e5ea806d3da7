//! Reshaping, slicing, concatenation and width flip.

use crate::error::{Result, TensorError};
use crate::tape::record;
use crate::tensor::{split_axis, validate_shape, Tensor};

impl Tensor {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        validate_shape("reshape", shape)?;
        if shape.iter().product::<usize>() != self.numel() {
            return Err(TensorError::shape("reshape", &self.shape, shape));
        }
        record("reshape", shape.to_vec(), self.to_vec(), &[self], |g, _| {
            vec![Some(g.to_vec())]
        })
    }

    /// `len` consecutive entries along `axis` starting at `start`.
    pub fn narrow(&self, axis: isize, start: usize, len: usize) -> Result<Tensor> {
        let ax = self.checked_axis("narrow", axis)?;
        if len == 0 || start + len > self.shape[ax] {
            return Err(TensorError::invalid(
                "narrow",
                format!("range {start}..{} exceeds axis extent {}", start + len, self.shape[ax]),
            ));
        }
        let (outer, full, inner) = split_axis(&self.shape, ax);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&self.data[(o * full + start) * inner..][..len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[ax] = len;
        record("narrow", shape, out, &[self], move |g, _| {
            let mut gx = vec![0.0; outer * full * inner];
            for o in 0..outer {
                gx[(o * full + start) * inner..][..len * inner]
                    .copy_from_slice(&g[o * len * inner..][..len * inner]);
            }
            vec![Some(gx)]
        })
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor], axis: isize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "no tensors given"))?;
        let ax = first.checked_axis("concat", axis)?;
        for p in &parts[1..] {
            let compatible = p.rank() == first.rank()
                && p.shape.iter().zip(&first.shape).enumerate().all(|(i, (a, b))| i == ax || a == b);
            if !compatible {
                return Err(TensorError::shape("concat", &first.shape, &p.shape));
            }
        }
        let (outer, _, inner) = split_axis(&first.shape, ax);
        let lens: Vec<usize> = parts.iter().map(|p| p.shape[ax]).collect();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                out.extend_from_slice(&p.data[o * l * inner..][..l * inner]);
            }
        }
        let mut shape = first.shape.clone();
        shape[ax] = total;
        record("concat", shape, out, parts, move |g, needs| {
            let mut grads: Vec<Option<Vec<f64>>> = lens
                .iter()
                .zip(needs)
                .map(|(&l, &n)| n.then(|| Vec::with_capacity(outer * l * inner)))
                .collect();
            let mut at = 0;
            for _ in 0..outer {
                for (gp, &l) in grads.iter_mut().zip(&lens) {
                    if let Some(gp) = gp {
                        gp.extend_from_slice(&g[at..at + l * inner]);
                    }
                    at += l * inner;
                }
            }
            grads
        })
    }

    /// Reverses the last (width) axis.
    pub fn flip_w(&self) -> Result<Tensor> {
        let w = *self.shape.last().expect("rank >= 1");
        let flip = move |src: &[f64]| -> Vec<f64> {
            let mut out = Vec::with_capacity(src.len());
            for row in src.chunks_exact(w) {
                out.extend(row.iter().rev());
            }
            out
        };
        let out = flip(&self.data);
        record("flip_w", self.shape.clone(), out, &[self], move |g, _| {
            vec![Some(flip(g))]
        })
    }
}
