//! Finite-difference gradient verification.
//!
//! Kept in the library proper (not test code) because the CLI self-test runs
//! it at runtime against the full model loss.

use crate::error::Result;

/// One verified parameter coordinate.
#[derive(Debug, Clone)]
pub struct CoordCheck {
    /// Human-readable parameter name.
    pub name: String,
    /// Flat index within the parameter tensor.
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Symmetric relative error with an absolute guard for near-zero pairs.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Central finite difference of a scalar function at `x0`.
pub fn central_difference(
    mut f: impl FnMut(f64) -> Result<f64>,
    x0: f64,
    h: f64,
) -> Result<f64> {
    let hi = f(x0 + h)?;
    let lo = f(x0 - h)?;
    Ok((hi - lo) / (2.0 * h))
}

/// Largest relative error in a batch of coordinate checks.
pub fn worst(checks: &[CoordCheck]) -> Option<&CoordCheck> {
    checks.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
}
