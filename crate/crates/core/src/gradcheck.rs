//! Central finite-difference verification of tape gradients.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Denominator floor for the relative error, so entries whose true gradient
/// is numerically zero are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

/// Where the largest relative error occurred.
#[derive(Clone, Debug, PartialEq)]
pub struct Offender {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    /// Relative error per input, per element. `None` where the finite
    /// difference itself did not converge and the element was skipped.
    pub errors: Vec<Vec<Option<f64>>>,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped_unstable: usize,
    pub tol: f64,
    pub worst: Option<Offender>,
}

impl GradReport {
    /// No checked element exceeded the tolerance.
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }

    /// At least one element was compared.
    pub fn conclusive(&self) -> bool {
        self.checked > 0
    }
}

fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), false))
        .collect();
    let out = f(&mut tape, &vars)?;
    tape.value(out).item()
}

/// Compare autodiff gradients of the scalar function `f` against central
/// differences `(f(x+eps) - f(x-eps)) / (2 eps)` for every input element.
///
/// Each element is also differenced at `2 eps`; when the two estimates
/// disagree by more than `tol` the finite difference is considered unstable
/// (e.g. LayerNorm on an almost constant row) and the element is skipped
/// instead of failed.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64, tol: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidConfig(format!("eps must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), true))
        .collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros_like(t))
        })
        .collect();
    drop(tape);

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = GradReport {
        errors: Vec::with_capacity(inputs.len()),
        max_rel_error: 0.0,
        checked: 0,
        skipped_unstable: 0,
        tol,
        worst: None,
    };
    for input in 0..inputs.len() {
        let mut errs = Vec::with_capacity(inputs[input].numel());
        for index in 0..inputs[input].numel() {
            let original = inputs[input].data()[index];
            let mut probe = |delta: f64| -> Result<f64> {
                work[input].data_mut()[index] = original + delta;
                let v = evaluate(&f, &work);
                work[input].data_mut()[index] = original;
                v
            };
            let numeric = (probe(eps)? - probe(-eps)?) / (2.0 * eps);
            let coarse = (probe(2.0 * eps)? - probe(-2.0 * eps)?) / (4.0 * eps);
            if rel_error(numeric, coarse) > tol {
                report.skipped_unstable += 1;
                errs.push(None);
                continue;
            }
            let a = analytic[input].data()[index];
            let err = rel_error(a, numeric);
            report.checked += 1;
            if report.worst.as_ref().is_none_or(|w| err > w.rel_error) {
                report.worst = Some(Offender {
                    input,
                    index,
                    analytic: a,
                    numeric,
                    rel_error: err,
                });
            }
            report.max_rel_error = report.max_rel_error.max(err);
            errs.push(Some(err));
        }
        report.errors.push(errs);
    }
    Ok(report)
}

/// Reduce a tensor to a scalar with fixed pseudo-random weights so that
/// gradient checks see a generic upstream gradient rather than all-ones.
pub fn weighted_sum(tape: &mut Tape, x: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(x, w)?;
    Ok(tape.sum(prod))
}
