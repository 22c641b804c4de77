//! Central finite-difference verification of tape gradients (64-bit only).

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for the relative error. Entries whose analytic and
/// numeric gradients are both below this are compared absolutely against
/// it, so exact zeros do not divide finite-difference rounding noise by 0.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct WorstElement {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<WorstElement>,
    pub elements_checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn evaluate<F>(inputs: &[Tensor<f64>], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::shape("check_gradients", "function must return a scalar"));
    }
    Ok(v.data()[0])
}

/// Compares the tape's gradient of the scalar `f(inputs)` with central
/// differences for every element of every input.
///
/// Fails with the worst element when the maximum relative error exceeds
/// `tolerance`.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        elements_checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, grads) in analytic.iter().enumerate() {
        for (e, &a) in grads.iter().enumerate() {
            let original = probe[i].data()[e];
            probe[i].data_mut()[e] = original + FD_STEP;
            let plus = evaluate(&probe, &f)?;
            probe[i].data_mut()[e] = original - FD_STEP;
            let minus = evaluate(&probe, &f)?;
            probe[i].data_mut()[e] = original;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = relative_error(a, numeric);
            report.elements_checked += 1;
            if err > report.max_rel_error || !err.is_finite() {
                report.max_rel_error = err;
                report.worst = Some(WorstElement {
                    input: i,
                    element: e,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    if !(report.max_rel_error <= tolerance) {
        let w = report.worst.as_ref().expect("set whenever error is positive");
        return Err(Error::Gradient(format!(
            "max relative error {:.3e} > {tolerance:.1e} at input {} element {} (analytic {:.9e}, numeric {:.9e})",
            report.max_rel_error, w.input, w.element, w.analytic, w.numeric
        )));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaky_relu_linear_region() {
        let x = Tensor::new(vec![1], vec![5.0]).unwrap();
        let report = check_gradients(&[x], |tape, v| Ok(tape.leaky_relu(v[0], 0.1)), 1e-9).unwrap();
        assert!(report.max_rel_error < 1e-9);
    }

    #[test]
    fn detects_wrong_gradient() {
        // A fused scalar that lies about its gradient must be caught.
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let err = check_gradients(
            &[x],
            |tape, v| {
                let d = tape.value(v[0]).data().to_vec();
                let value = d[0] * d[0] + d[1];
                tape.fused_scalar(&[v[0]], value, vec![vec![2.0 * d[0], 3.0]])
            },
            1e-5,
        )
        .unwrap_err();
        assert!(err.to_string().contains("element 1"), "{err}");
    }
}
