//! Central finite-difference gradient verification.
//!
//! Every backward pass in this crate is hand-derived, so each one is checked
//! against numerical differentiation on small instances. The checker reports
//! the worst relative error over all coordinates, using
//! `|a - n| / max(1e-12, |a| + |n|)` as the comparison metric.

use serde::Serialize;

/// Outcome of one gradient check.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    /// Name of the parameter block checked.
    pub block: String,
    /// Number of coordinates compared.
    pub coords: usize,
    /// Worst relative error over the coordinates.
    pub max_rel_error: f64,
    /// Worst relative error restricted to coordinates where either gradient
    /// is larger than `1e-9`. Architectures with exactly invariant
    /// directions (a bias feeding straight into a batch norm) have true-zero
    /// gradients whose rounding dust the plain metric amplifies; this one
    /// skips them.
    pub max_rel_error_active: f64,
    /// Coordinate attaining the worst error.
    pub worst_coord: usize,
    /// Analytic and numeric values at the worst coordinate.
    pub analytic: f64,
    pub numeric: f64,
}

/// Relative error between an analytic and a numeric derivative.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1e-12, analytic.abs() + numeric.abs())
}

/// Central-difference gradient of `f` at `point`.
///
/// Panics if `f` returns a non-finite value at a probe point; gradient
/// checks run on tiny instances where that always indicates a bug.
pub fn central_difference<F>(f: &mut F, point: &[f64], eps: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for j in 0..point.len() {
        probe[j] = point[j] + eps;
        let plus = f(&probe);
        probe[j] = point[j] - eps;
        let minus = f(&probe);
        probe[j] = point[j];
        assert!(
            plus.is_finite() && minus.is_finite(),
            "objective non-finite at coordinate {j}"
        );
        grad.push((plus - minus) / (2.0 * eps));
    }
    grad
}

/// Compare `analytic` against the central-difference gradient of `f`.
pub fn check_gradient<F>(
    block: impl Into<String>,
    f: &mut F,
    point: &[f64],
    analytic: &[f64],
    eps: f64,
) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(point.len(), analytic.len(), "gradient length mismatch");
    let numeric = central_difference(f, point, eps);
    let mut report = GradCheckReport {
        block: block.into(),
        coords: point.len(),
        max_rel_error: 0.0,
        max_rel_error_active: 0.0,
        worst_coord: 0,
        analytic: f64::NAN,
        numeric: f64::NAN,
    };
    for (j, (&a, &n)) in analytic.iter().zip(numeric.iter()).enumerate() {
        let err = rel_error(a, n);
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst_coord = j;
            report.analytic = a;
            report.numeric = n;
        }
        if (a.abs() > 1e-9 || n.abs() > 1e-9) && err > report.max_rel_error_active {
            report.max_rel_error_active = err;
        }
    }
    if point.is_empty() {
        report.analytic = 0.0;
        report.numeric = 0.0;
    }
    report
}
