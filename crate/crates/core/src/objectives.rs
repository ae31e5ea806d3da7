//! Confidence-calibrated photometric losses.
//!
//! Per pixel the loss is the negative log of a Laplacian with scale `sigma`
//! over the channel-mean absolute residual `e`:
//! `ln(sqrt2 * sigma) + sqrt2 * e / sigma`. Batched inputs produce one loss
//! per view; the scalar versions average over views.

use std::f64::consts::SQRT_2;

use lap_tensor::Tensor;

use crate::error::{contract, Error, Result};
use crate::render::RenderOutput;

pub const DEFAULT_FLIP_WEIGHT: f64 = 0.5;
pub const DEFAULT_MIN_FACE_FRACTION: f64 = 0.10;

/// Channel-mean absolute residual, `[B, 1, H, W]`.
pub fn residual(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.shape() != target.shape() || pred.rank() != 4 {
        return Err(contract(format!(
            "residual: prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(pred.sub(target)?.abs()?.mean_axis(1, true)?)
}

fn laplace_term(e: &Tensor, sigma: &Tensor) -> Result<Tensor> {
    if e.shape() != sigma.shape() {
        return Err(contract(format!(
            "confidence map {:?} does not match residual {:?}",
            sigma.shape(),
            e.shape()
        )));
    }
    let reg = sigma.scale(SQRT_2)?.ln()?;
    Ok(reg.add(&e.div(sigma)?.scale(SQRT_2)?)?)
}

/// Sums `[B, 1, H, W]` per view to `[B]`.
fn per_view_sum(t: &Tensor) -> Result<Tensor> {
    let b = t.dim(0);
    Ok(t.reshape(&[b, t.numel() / b])?.sum_axis(1, false)?)
}

/// Per-view weighted mean of `terms` over `weights`, erroring on any view
/// with zero total weight.
fn weighted_mean(terms: &Tensor, weights: &Tensor, what: &'static str) -> Result<Tensor> {
    let norm = per_view_sum(weights)?;
    if norm.data().iter().any(|&n| n <= 0.0) {
        return Err(Error::EmptyDomain(what));
    }
    Ok(per_view_sum(&terms.mul(weights)?)?.div(&norm)?)
}

/// Per-view `[B]` reconstruction loss. `omega` is a constant 0/1 map
/// (`[B, 1, H, W]`); `None` uses every pixel.
pub fn recon_nll_per_view(pred: &Tensor, target: &Tensor, sigma: &Tensor, omega: Option<&Tensor>) -> Result<Tensor> {
    let terms = laplace_term(&residual(pred, target)?, sigma)?;
    match omega {
        Some(m) => weighted_mean(&terms, m, "recon_nll"),
        None => {
            let b = terms.dim(0);
            Ok(terms.reshape(&[b, terms.numel() / b])?.mean_axis(1, false)?)
        }
    }
}

pub fn recon_nll(pred: &Tensor, target: &Tensor, sigma: &Tensor, omega: Option<&Tensor>) -> Result<Tensor> {
    Ok(recon_nll_per_view(pred, target, sigma, omega)?.mean()?)
}

/// Per-view `[B]` relaxed consistency loss: the residual is scaled by the
/// relaxed mask, the sum runs over pixels with positive weight and is
/// normalised by the mask's total weight.
pub fn relaxed_consistency_per_view(pred: &Tensor, target: &Tensor, sigma: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let e = residual(pred, target)?;
    if mask.shape() != e.shape() {
        return Err(contract(format!("mask {:?} does not match residual {:?}", mask.shape(), e.shape())));
    }
    let terms = laplace_term(&e.mul(mask)?, sigma)?;
    let support: Vec<f64> = mask.data().iter().map(|&m| if m > 0.0 { 1.0 } else { 0.0 }).collect();
    let support = Tensor::new(mask.shape().to_vec(), support)?;
    let norm = per_view_sum(mask)?;
    if norm.data().iter().any(|&n| n <= 0.0) {
        return Err(Error::EmptyDomain("relaxed_consistency"));
    }
    Ok(per_view_sum(&terms.mul(&support)?)?.div(&norm)?)
}

pub fn relaxed_consistency(pred: &Tensor, target: &Tensor, sigma: &Tensor, mask: &Tensor) -> Result<Tensor> {
    Ok(relaxed_consistency_per_view(pred, target, sigma, mask)?.mean()?)
}

/// Which calibrated loss a stage applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// Relaxed consistency under the relaxed mask.
    Relaxed,
    /// Reconstruction over the binary support of the mask.
    Recon,
}

/// `mask > 0` as a constant 0/1 map.
pub fn support(mask: &Tensor) -> Result<Tensor> {
    let s = mask.data().iter().map(|&m| if m > 0.0 { 1.0 } else { 0.0 }).collect();
    Ok(Tensor::new(mask.shape().to_vec(), s)?)
}

/// Per-view `[B]` loss of one render against its targets.
pub fn view_loss(kind: LossKind, pred: &Tensor, target: &Tensor, sigma: &Tensor, mask: &Tensor) -> Result<Tensor> {
    match kind {
        LossKind::Relaxed => relaxed_consistency_per_view(pred, target, sigma, mask),
        LossKind::Recon => recon_nll_per_view(pred, target, sigma, Some(&support(mask)?)),
    }
}

/// Per-view `[B]` combination `L(render) + flip_weight * L(flipped render)`.
/// `sigmas` is `[B, 2, H, W]` holding (sigma, sigma').
#[allow(clippy::too_many_arguments)]
pub fn total_objective_per_view(
    kind: LossKind,
    render: &RenderOutput,
    flipped: &RenderOutput,
    target: &Tensor,
    sigmas: &Tensor,
    mask: &Tensor,
    flip_weight: f64,
) -> Result<Tensor> {
    let sigma = sigmas.narrow(1, 0, 1)?;
    let sigma_flip = sigmas.narrow(1, 1, 1)?;
    let direct = view_loss(kind, &render.image, target, &sigma, mask)?;
    if flip_weight == 0.0 {
        return Ok(direct);
    }
    let mirrored = view_loss(kind, &flipped.image, target, &sigma_flip, mask)?;
    Ok(direct.add(&mirrored.scale(flip_weight)?)?)
}

pub fn total_objective(
    kind: LossKind,
    render: &RenderOutput,
    flipped: &RenderOutput,
    target: &Tensor,
    sigmas: &Tensor,
    mask: &Tensor,
    flip_weight: f64,
) -> Result<Tensor> {
    Ok(total_objective_per_view(kind, render, flipped, target, sigmas, mask, flip_weight)?.mean()?)
}

/// Fraction of pixels with positive mask weight.
pub fn face_fraction(mask: &Tensor) -> f64 {
    let n = mask.numel();
    mask.data().iter().filter(|&&m| m > 0.0).count() as f64 / n as f64
}

/// Accepts a sample when its face fraction reaches `min_face_fraction`.
pub fn mask_filter(mask: &Tensor, min_face_fraction: f64) -> bool {
    face_fraction(mask) >= min_face_fraction
}
