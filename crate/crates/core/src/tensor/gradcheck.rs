//! Central finite differences for checking tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Step used by every gradient check in this crate.
pub const STEP: f64 = 1e-5;

/// Absolute floor in the relative-error denominator. Gradients smaller than
/// this are compared in absolute terms, which keeps entries that are zero
/// analytically (and FD round-off noise around them) from dominating.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Gradient of `f` at `x` by central differences, one coordinate at a time.
pub fn numeric_gradient(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> Result<f64>) -> Result<Tensor> {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

#[derive(Clone, Debug, Default)]
pub struct CheckSummary {
    pub max_rel_err: f64,
    pub checked: usize,
}

impl CheckSummary {
    pub fn merge(&mut self, other: &CheckSummary) {
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.checked += other.checked;
    }

    pub fn observe(&mut self, analytic: f64, numeric: f64) {
        self.max_rel_err = self.max_rel_err.max(relative_error(analytic, numeric));
        self.checked += 1;
    }
}

/// Compares tape gradients of a scalar function of several inputs against
/// central differences. `f` receives one tracked [`Var`] per input.
pub fn check<F>(inputs: &[Tensor], f: F) -> Result<CheckSummary>
where
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&vars)?;
    let grads = tape.backward(&loss)?;

    let mut summary = CheckSummary::default();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt_or_zero(&vars[k]);
        let numeric = numeric_gradient(input, STEP, |probe| {
            let tape = Tape::no_grad();
            let vars: Vec<Var<'_>> = inputs
                .iter()
                .enumerate()
                .map(|(j, t)| tape.constant(if j == k { probe.clone() } else { t.clone() }))
                .collect();
            Ok(f(&vars)?.item())
        })?;
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            summary.observe(*a, *n);
        }
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_is_symmetric_and_floored() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!(relative_error(0.0, 1e-9) < 1e-2);
    }

    #[test]
    fn numeric_gradient_of_square() {
        let x = Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = numeric_gradient(&x, STEP, |t| Ok(t.data().iter().map(|v| v * v).sum())).unwrap();
        for (gv, xv) in g.data().iter().zip(x.data()) {
            assert!((gv - 2.0 * xv).abs() < 1e-8);
        }
    }
}
