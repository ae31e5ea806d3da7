//! Adaptive aggregation of per-image codes into one identity code.
//!
//! Each code `x_i` gets raw channel weights `w_i = mlp(x_i)`; a softmax over
//! the set axis, taken independently per channel, turns them into convex
//! weights and the output is `sum_i softmax(w)_i * x_i`.

use std::cmp::Ordering;

use lap_tensor::Tensor;
use rand_chacha::ChaCha8Rng;

use super::layers::Mlp;
use super::params::{Binder, ParamStore};
use crate::error::{contract, Result};

#[derive(Clone, Debug)]
pub struct Aggregator {
    mlp: Mlp,
    code: usize,
}

#[derive(Clone, Debug)]
pub struct Aggregated {
    /// `[1, c]`.
    pub code: Tensor,
    /// Normalised weights `[N, c]`, rows in input order.
    pub weights: Tensor,
}

impl Aggregator {
    pub fn new(prefix: &str, code: usize) -> Self {
        Self {
            mlp: Mlp::new(prefix, code, code, code),
            code,
        }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.mlp.register(store, rng)
    }

    /// `codes` is `[N, c]` with `N >= 1`.
    pub fn forward(&self, p: &Binder, codes: &Tensor) -> Result<Aggregated> {
        if codes.rank() != 2 || codes.dim(1) != self.code {
            return Err(contract(format!("aggregate: expected [N, {}], got {:?}", self.code, codes.shape())));
        }
        let raw = self.mlp.forward(p, codes)?;
        combine(codes, &raw)
    }
}

fn row_cmp(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Gathers rows of `t` (`[N, c]`) in the given order.
fn permute_rows(t: &Tensor, order: &[usize]) -> Result<Tensor> {
    let rows: Vec<Tensor> = order.iter().map(|&i| t.narrow(0, i, 1)).collect::<lap_tensor::Result<_>>()?;
    let refs: Vec<&Tensor> = rows.iter().collect();
    Ok(Tensor::concat(&refs, 0)?)
}

/// Softmax-weighted combination of `codes` under raw weights `raw`, both
/// `[N, c]`.
///
/// The set is put in a canonical order (by code, then raw weight) before
/// any arithmetic, so the result is bit-identical under every permutation
/// of the input rows.
pub fn combine(codes: &Tensor, raw: &Tensor) -> Result<Aggregated> {
    if codes.rank() != 2 || codes.shape() != raw.shape() {
        return Err(contract(format!("aggregate: codes {:?} vs weights {:?}", codes.shape(), raw.shape())));
    }
    let (n, c) = (codes.dim(0), codes.dim(1));
    if n == 0 {
        return Err(contract("aggregate: empty set"));
    }
    let (xd, wd) = (codes.data(), raw.data());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        row_cmp(&xd[i * c..][..c], &xd[j * c..][..c]).then_with(|| row_cmp(&wd[i * c..][..c], &wd[j * c..][..c]))
    });
    let (x, w) = if order.iter().enumerate().all(|(k, &i)| k == i) {
        (codes.clone(), raw.clone())
    } else {
        (permute_rows(codes, &order)?, permute_rows(raw, &order)?)
    };
    let weights = w.softmax(0)?;
    let code = weights.mul(&x)?.sum_axis(0, true)?;
    let mut inverse = vec![0; n];
    for (k, &i) in order.iter().enumerate() {
        inverse[i] = k;
    }
    Ok(Aggregated {
        code,
        weights: permute_rows(&weights, &inverse)?,
    })
}
