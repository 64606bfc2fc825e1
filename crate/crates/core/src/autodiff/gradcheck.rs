//! Central finite-difference check of tape gradients.

use super::{Tape, Var};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Denominator floor of the relative error, so that gradients that are
/// numerically zero are compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, RELATIVE_FLOOR)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(input, flat index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Distance of the evaluation point to the nearest kink (see [`Tape::kink_margin`]).
    pub kink_margin: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Compares the tape gradient of the scalar `f` at `inputs` against central
/// differences with step `eps`; passes iff the max relative error is `<= tol`.
///
/// `f` is re-run on a fresh tape for every probe and receives one leaf per input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        if tape.value(out).numel() != 1 {
            return Err(Error::Contract(format!(
                "grad_check needs a scalar function, got shape {:?}",
                tape.value(out).shape()
            )));
        }
        Ok((tape, vars, out))
    };

    let (tape, vars, out) = eval(inputs)?;
    let grads = tape.backward(out)?;
    let kink_margin = tape.kink_margin();

    let mut probe = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        checked: 0,
        kink_margin,
        tol,
        passed: true,
    };
    for (which, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[which], input.shape());
        for idx in 0..input.numel() {
            let original = input.data()[idx];
            probe[which].data_mut()[idx] = original + eps;
            let (t_plus, _, o_plus) = eval(&probe)?;
            probe[which].data_mut()[idx] = original - eps;
            let (t_minus, _, o_minus) = eval(&probe)?;
            probe[which].data_mut()[idx] = original;

            let numeric = (t_plus.value(o_plus).item()? - t_minus.value(o_minus).item()?) / (2.0 * eps);
            let a = analytic.data()[idx];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || !rel.is_finite() {
                report.max_rel_error = rel;
                report.worst = Some((which, idx));
            }
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}
