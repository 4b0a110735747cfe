use crate::error::{Error, Result};

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// Coordinate where the worst error occurred.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares the gradient returned by `f(θ)` with
/// `(f(θ + εeᵢ) − f(θ − εeᵢ)) / 2ε` for every coordinate.
///
/// The per-coordinate error is `|a − n| / max(1e-12, |a| + |n|)`; the report
/// carries the maximum.
pub fn finite_diff_check<F>(mut f: F, theta: &[f64], eps: f64) -> Result<FdReport>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (v0, analytic) = f(theta)?;
    if !v0.is_finite() {
        return Err(Error::Numeric("function value is not finite".into()));
    }
    if analytic.len() != theta.len() {
        return Err(Error::invalid("gradient length differs from parameter count"));
    }
    let mut probe = theta.to_vec();
    let mut numeric = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        probe[i] = theta[i] + eps;
        let (fp, _) = f(&probe)?;
        probe[i] = theta[i] - eps;
        let (fm, _) = f(&probe)?;
        probe[i] = theta[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(format!("non-finite value probing coordinate {i}")));
        }
        numeric.push((fp - fm) / (2.0 * eps));
    }
    let mut worst = 0.0;
    let mut worst_index = 0;
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let e = (a - n).abs() / (a.abs() + n.abs()).max(1e-12);
        if e > worst {
            worst = e;
            worst_index = i;
        }
    }
    Ok(FdReport {
        max_rel_error: worst,
        worst_index,
        analytic,
        numeric,
    })
}
