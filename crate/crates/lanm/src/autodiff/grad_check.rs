//! Gradient verification against central finite differences.
//!
//! The checker treats the tape as a black box: a *builder* closure receives a
//! fresh tape plus parameter nodes and returns a scalar root. Analytic
//! gradients come from one backward sweep; numeric gradients re-run the
//! builder twice per parameter coordinate with that coordinate nudged by
//! `±eps`, so the two sides share no code path that could hide a bug.

use crate::autodiff::tape::{NodeId, Tape};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Relative-error threshold below which two values count as exactly equal.
/// Guards against 0/0 when both gradients are (near) zero.
const ABS_FLOOR: f64 = 1e-8;

/// The coordinate with the largest relative error, for diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct WorstCoordinate {
    /// Index into the parameter list.
    pub param: usize,
    /// Flat (row-major) index within the parameter.
    pub entry: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Outcome of one gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
    /// Present whenever at least one coordinate was compared.
    pub worst: Option<WorstCoordinate>,
}

/// Evaluate the builder's scalar output at the given parameter values.
fn eval_scalar<F>(params: &[Tensor], build: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|t| tape.param(t.clone())).collect();
    let root = build(&mut tape, &ids)?;
    let v = tape.value(root);
    if v.shape() != (1, 1) {
        return Err(Error::Operand {
            op: "grad_check",
            rows: v.rows(),
            cols: v.cols(),
            msg: "builder must return a 1x1 scalar root".into(),
        });
    }
    Ok(v.item())
}

/// Central-difference gradient of the builder's scalar output with respect to
/// every parameter coordinate. The step is scaled to the coordinate,
/// `eps = 1e-5 * max(1, |theta|)`, which balances truncation against
/// round-off across the magnitudes seen in practice.
pub fn central_difference_gradients<F>(params: &[Tensor], build: F) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut work: Vec<Tensor> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut grad = Tensor::zeros(params[pi].rows(), params[pi].cols());
        for k in 0..params[pi].len() {
            let theta = params[pi].data()[k];
            let eps = 1e-5 * theta.abs().max(1.0);
            work[pi].data_mut()[k] = theta + eps;
            let f_plus = eval_scalar(&work, &build)?;
            work[pi].data_mut()[k] = theta - eps;
            let f_minus = eval_scalar(&work, &build)?;
            work[pi].data_mut()[k] = theta;
            grad.data_mut()[k] = (f_plus - f_minus) / (2.0 * eps);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Coordinate-wise relative error between two gradient values:
/// zero when they agree to within `1e-8` absolutely, otherwise
/// `|a - b| / max(|a|, |b|)`.
fn rel_error(a: f64, b: f64) -> f64 {
    let diff = (a - b).abs();
    if diff <= ABS_FLOOR {
        0.0
    } else {
        diff / a.abs().max(b.abs())
    }
}

/// Compare analytic against numeric gradients coordinate by coordinate.
///
/// Taking both sides as plain tensors keeps this function independent of how
/// either was produced, so a deliberately corrupted analytic gradient is
/// reported as a failure like any other.
pub fn compare_to_finite_differences(
    analytic: &[Tensor],
    numeric: &[Tensor],
    tolerance: f64,
) -> Result<GradCheckReport> {
    if analytic.len() != numeric.len() {
        return Err(Error::Dimension(format!(
            "gradient lists have {} vs {} parameters",
            analytic.len(),
            numeric.len()
        )));
    }
    let mut max_rel_error = 0.0;
    let mut worst = None;
    for (pi, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        if a.shape() != n.shape() {
            return Err(Error::Dimension(format!(
                "parameter {pi}: analytic gradient is {}x{}, numeric is {}x{}",
                a.rows(),
                a.cols(),
                n.rows(),
                n.cols()
            )));
        }
        for (k, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
            let e = rel_error(av, nv);
            if e >= max_rel_error {
                max_rel_error = e;
                worst = Some(WorstCoordinate {
                    param: pi,
                    entry: k,
                    analytic: av,
                    numeric: nv,
                });
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        tolerance,
        pass: max_rel_error <= tolerance,
        worst,
    })
}

/// Full gradient check: backward pass vs central differences.
///
/// The builder is invoked once for the analytic side and `2 * #coordinates`
/// times for the numeric side; it must be a pure function of the tape and the
/// parameter nodes it is handed.
pub fn grad_check<F>(params: &[Tensor], build: F, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|t| tape.param(t.clone())).collect();
    let root = build(&mut tape, &ids)?;
    let v = tape.value(root);
    if v.shape() != (1, 1) {
        return Err(Error::Operand {
            op: "grad_check",
            rows: v.rows(),
            cols: v.cols(),
            msg: "builder must return a 1x1 scalar root".into(),
        });
    }
    let grads = tape.backward(root)?;
    let analytic: Vec<Tensor> = ids.iter().map(|id| grads.wrt(*id).clone()).collect();
    let numeric = central_difference_gradients(params, &build)?;
    compare_to_finite_differences(&analytic, &numeric, tolerance)
}
