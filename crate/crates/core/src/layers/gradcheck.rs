//! Central finite-difference verification of analytic gradients.

use crate::parallel;

#[derive(Debug, Clone, PartialEq)]
pub struct GradFailure {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub failures: Vec<GradFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic[i]` against `(f(p + εeᵢ) - f(p - εeᵢ)) / 2ε` for every
/// coordinate of `params`. Coordinates are evaluated in parallel when the
/// `parallel` feature is on; the report is identical either way.
pub fn grad_check<F>(f: F, params: &[f64], analytic: &[f64], eps: f64, tol: f64) -> GradCheckReport
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    assert_eq!(
        params.len(),
        analytic.len(),
        "one analytic gradient per parameter"
    );
    let numeric = parallel::map_indexed(params.len(), |i| {
        let mut p = params.to_vec();
        p[i] = params[i] + eps;
        let hi = f(&p);
        p[i] = params[i] - eps;
        let lo = f(&p);
        (hi - lo) / (2.0 * eps)
    });
    let mut max_rel_error: f64 = 0.0;
    let mut failures = Vec::new();
    for (index, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let rel = relative_error(a, n);
        max_rel_error = max_rel_error.max(rel);
        if !(rel < tol) {
            failures.push(GradFailure {
                index,
                analytic: a,
                numeric: n,
                rel_error: rel,
            });
        }
    }
    GradCheckReport {
        checked: params.len(),
        max_rel_error,
        failures,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_matches() {
        let r = grad_check(|w| w[0] * w[0], &[3.0], &[6.0], 1e-5, 1e-9);
        assert!(r.passed(), "{r:?}");
        assert!(r.max_rel_error < 1e-9);
    }

    #[test]
    fn corrupted_gradient_is_reported() {
        let f = |w: &[f64]| w[0] * w[0] + 3.0 * w[1];
        let r = grad_check(f, &[3.0, 1.0], &[6.0 * 1.1, 3.0], 1e-5, 1e-6);
        assert_eq!(r.failures.len(), 1);
        assert_eq!(r.failures[0].index, 0);
        assert!((r.failures[0].rel_error - 0.6 / 6.6).abs() < 1e-6);
    }
}
