//! Finite-difference verification of analytic gradients.
//!
//! The oracle is independent of the differentiation graph: it re-evaluates a
//! scalar function at perturbed inputs and forms central differences. The
//! full suite ([`run_suite`]) backs the `smgan gradcheck` subcommand.

use crate::error::Result;
use crate::tensor::Tensor;

mod suite;
pub use suite::run_suite;

/// Default central-difference step (64-bit arithmetic).
pub const FD_STEP: f64 = 1e-5;

/// Floor below which gradient entries are compared absolutely; relative
/// error is meaningless against a near-zero reference.
pub const REL_FLOOR: f64 = 1e-6;

/// Central finite differences of a scalar-valued function at `x`.
pub fn central_diff(
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    step: f64,
) -> Result<Tensor> {
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * step);
    }
    Ok(grad)
}

/// Largest relative discrepancy between an analytic gradient and its
/// finite-difference estimate.
pub fn max_rel_err(analytic: &Tensor, fd: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), fd.shape());
    analytic
        .data()
        .iter()
        .zip(fd.data())
        .map(|(&a, &f)| (a - f).abs() / a.abs().max(f.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max)
}

/// Outcome of one named check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl CheckResult {
    pub fn new(name: impl Into<String>, max_rel_err: f64, tol: f64) -> Self {
        CheckResult {
            name: name.into(),
            max_rel_err,
            tol,
        }
    }

    pub fn pass(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < self.tol
    }
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<52} rel_err {:.3e}  (tol {:.1e})",
            if self.pass() { "PASS" } else { "FAIL" },
            self.name,
            self.max_rel_err,
            self.tol
        )
    }
}
