//! Central-difference verification of tape gradients.

use crate::error::{Result, TensorError};
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const MIN_STEP: f64 = 1e-6;
pub const MAX_STEP: f64 = 1e-3;

/// Floor of the relative-error denominator.
const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Probe at most this many entries per input, evenly strided. `None`
    /// probes every entry.
    pub max_probes: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            max_probes: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error per input.
    pub max_rel_error: Vec<f64>,
    /// Number of entries probed per input.
    pub probes: Vec<usize>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares tape gradients of scalar-valued `f` against central
/// differences, returning the largest relative error per input.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let opts = GradCheckOptions {
        step,
        max_probes: None,
    };
    Ok(finite_diff_check_with(f, inputs, &opts)?.max_rel_error)
}

pub fn finite_diff_check_with<F>(
    f: F,
    inputs: &[Tensor],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    if !(MIN_STEP..=MAX_STEP).contains(&opts.step) {
        return Err(TensorError::invalid(
            "finite_diff_check",
            format!("step {} outside [{MIN_STEP}, {MAX_STEP}]", opts.step),
        ));
    }
    let tape = Tape::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let loss = f(&leaves)?;
    let grads = tape.backward(&loss)?;
    let analytic: Vec<Tensor> = leaves.iter().map(|l| grads.get(l)).collect::<Result<_>>()?;

    let plain: Vec<Tensor> = inputs.iter().map(Tensor::detach).collect();
    let eval = |args: &[Tensor]| -> Result<f64> { f(args)?.item() };
    let base = eval(&plain)?;
    if base.to_bits() != loss.item()?.to_bits() || eval(&plain)?.to_bits() != base.to_bits() {
        return Err(TensorError::Verification(
            "function is not deterministic across probe calls".into(),
        ));
    }

    let h = opts.step;
    let mut max_rel_error = Vec::with_capacity(inputs.len());
    let mut probes = Vec::with_capacity(inputs.len());
    for (i, input) in plain.iter().enumerate() {
        let n = input.numel();
        let count = opts.max_probes.map_or(n, |p| p.clamp(1, n));
        let mut worst = 0.0f64;
        for p in 0..count {
            let j = p * n / count;
            let probe = |delta: f64| -> Result<f64> {
                let mut data = input.to_vec();
                data[j] += delta;
                let mut args = plain.clone();
                args[i] = Tensor::new(input.shape().to_vec(), data)?;
                eval(&args)
            };
            let numeric = (probe(h)? - probe(-h)?) / (2.0 * h);
            worst = worst.max(relative_error(analytic[i].data()[j], numeric));
        }
        max_rel_error.push(worst);
        probes.push(count);
    }
    Ok(GradCheckReport {
        max_rel_error,
        probes,
    })
}
