//! Central-difference gradient checking.

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    /// Flat coordinate with the largest relative error.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub pass: bool,
}

/// Relative error with the `max(|a|, |n|, 1e-8)` denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Checks every coordinate of `x`.
///
/// `f` returns the scalar value and its analytic gradient with respect to `x`.
pub fn gradcheck<F>(f: F, x: &Tensor, eps: f64, tol: f64) -> Result<GradcheckReport>
where
    F: Fn(&Tensor) -> Result<(f64, Tensor)>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    gradcheck_coords(f, x, &coords, eps, tol)
}

/// Like [`gradcheck`] but only perturbs the listed flat coordinates.
pub fn gradcheck_coords<F>(
    f: F,
    x: &Tensor,
    coords: &[usize],
    eps: f64,
    tol: f64,
) -> Result<GradcheckReport>
where
    F: Fn(&Tensor) -> Result<(f64, Tensor)>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(invalid!("gradcheck eps {eps} outside [1e-6, 1e-3]"));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("gradcheck input".into()));
    }
    let (value, analytic) = f(x)?;
    if !value.is_finite() {
        return Err(Error::NonFinite("gradcheck objective".into()));
    }
    analytic.check_same("gradcheck", x)?;

    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        pass: true,
    };
    let mut probe = x.clone();
    for &i in coords {
        if i >= x.len() {
            return Err(invalid!("gradcheck coordinate {i} out of range {}", x.len()));
        }
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let (plus, _) = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let (minus, _) = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite("gradcheck objective".into()));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.data()[i];
        let err = relative_error(a, numeric);
        if err > report.max_rel_err || report.checked == 0 {
            report.max_rel_err = err;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
        report.checked += 1;
    }
    report.pass = report.max_rel_err < tol;
    Ok(report)
}
