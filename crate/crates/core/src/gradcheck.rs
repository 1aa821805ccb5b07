//! Central-difference gradient checking against analytic gradients.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::param::ParamSet;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Compare analytic gradients of a scalar function against central finite
/// differences, coordinate by coordinate, over every tensor in `params`.
///
/// Returns the max over coordinates of
/// `|g_fd - g_an| / max(1e-8, |g_fd| + |g_an|)`.
pub fn finite_diff_check<F>(
    mut f: F,
    params: &ParamSet,
    analytic: &[Matrix],
    eps: f64,
) -> Result<f64>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    if analytic.len() != params.len() {
        return Err(Error::Dimension(format!(
            "analytic gradients for {} tensors, params have {}",
            analytic.len(),
            params.len()
        )));
    }
    let mut work = params.clone();
    let mut max_err = 0.0_f64;
    for t in 0..params.len() {
        let (rows, cols) = {
            let v = &params.tensor(t).value;
            (v.rows(), v.cols())
        };
        if analytic[t].rows() != rows || analytic[t].cols() != cols {
            return Err(Error::Dimension(format!(
                "analytic gradient shape mismatch for tensor '{}'",
                params.tensor(t).name
            )));
        }
        for i in 0..rows {
            for j in 0..cols {
                let orig = work.tensor(t).value.get(i, j);

                work.tensor_mut(t).value.set(i, j, orig + eps);
                let plus = f(&work)?;
                work.tensor_mut(t).value.set(i, j, orig - eps);
                let minus = f(&work)?;
                work.tensor_mut(t).value.set(i, j, orig);

                if !plus.is_finite() || !minus.is_finite() {
                    return Err(Error::Numeric(format!(
                        "function value not finite while perturbing '{}'[{},{}]",
                        params.tensor(t).name,
                        i,
                        j
                    )));
                }
                let g_fd = (plus - minus) / (2.0 * eps);
                let g_an = analytic[t].get(i, j);
                let err = (g_fd - g_an).abs() / 1e-8_f64.max(g_fd.abs() + g_an.abs());
                max_err = max_err.max(err);
            }
        }
    }
    Ok(max_err)
}

/// Central-difference check of a scalar parameter (e.g. a log-temperature).
pub fn finite_diff_scalar<F>(mut f: F, x: f64, analytic: f64, eps: f64) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    let plus = f(x + eps)?;
    let minus = f(x - eps)?;
    if !plus.is_finite() || !minus.is_finite() {
        return Err(Error::Numeric("function value not finite".into()));
    }
    let g_fd = (plus - minus) / (2.0 * eps);
    Ok((g_fd - analytic).abs() / 1e-8_f64.max(g_fd.abs() + analytic.abs()))
}
