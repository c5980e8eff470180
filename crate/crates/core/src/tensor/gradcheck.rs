//! Central finite-difference checks of tape adjoints.
//!
//! Only forward evaluations are used to build the numeric estimate, so the
//! check does not share any code with the backward pass it audits.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Tolerances for one gradient comparison.
#[derive(Clone, Copy, Debug)]
pub struct Tolerance {
    pub step: f64,
    pub rel: f64,
    pub abs: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rel: 1e-4,
            abs: 1e-7,
        }
    }
}

/// Outcome of comparing analytic and numeric gradients.
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// Largest relative error among entries whose absolute error exceeds `abs`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub entries: usize,
    pub failures: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        self.entries += other.entries;
        self.failures += other.failures;
    }
}

/// Compares adjoints of `f` with respect to every input against central
/// differences of step `tol.step`.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, tol: Tolerance) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let root = f(&tape, &vars)?;
    tape.backward(root)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape())))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        for k in 0..input.numel() {
            let mut plus = input.data().to_vec();
            let mut minus = input.data().to_vec();
            plus[k] += tol.step;
            minus[k] -= tol.step;
            work[which] = Tensor::from_parts(input.shape().to_vec(), plus);
            let fp = eval(&work)?;
            work[which] = Tensor::from_parts(input.shape().to_vec(), minus);
            let fm = eval(&work)?;
            work[which] = input.clone();

            let numeric = (fp - fm) / (2.0 * tol.step);
            let exact = analytic[which].data()[k];
            let abs_err = (numeric - exact).abs();
            report.entries += 1;
            report.max_abs_err = report.max_abs_err.max(abs_err);
            if abs_err > tol.abs {
                let rel = abs_err / numeric.abs().max(exact.abs());
                report.max_rel_err = report.max_rel_err.max(rel);
                if rel > tol.rel {
                    report.failures += 1;
                }
            }
        }
    }
    Ok(report)
}
