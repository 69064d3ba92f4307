//! Central finite differences, used as an independent oracle for gradients.

use thiserror::Error;

use super::ad::{value_and_grad, AdError, ScalarFn};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FdError {
    #[error("function value is not finite ({value}) at coordinate {coord}")]
    NonFinite { coord: usize, value: f64 },
    #[error(transparent)]
    Ad(#[from] AdError),
}

/// Central-difference gradient of `f` at `x`.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Result<Vec<f64>, FdError> {
    let mut xp = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        for v in [fp, fm] {
            if !v.is_finite() {
                return Err(FdError::NonFinite { coord: i, value: v });
            }
        }
        g.push((fp - fm) / (2.0 * h));
    }
    Ok(g)
}

/// Central-difference Jacobian (rows = outputs).
pub fn fd_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> Vec<Vec<f64>> {
    let m = f(x).len();
    let mut jac = vec![vec![0.0; x.len()]; m];
    let mut xp = x.to_vec();
    for j in 0..x.len() {
        xp[j] = x[j] + h;
        let fp = f(&xp);
        xp[j] = x[j] - h;
        let fm = f(&xp);
        xp[j] = x[j];
        for i in 0..m {
            jac[i][j] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    jac
}

/// max_i |fd_i − g_i| / (|g_i| + 1e-12)
pub fn relative_error(grad: &[f64], fd: &[f64]) -> f64 {
    grad.iter()
        .zip(fd)
        .map(|(g, d)| (d - g).abs() / (g.abs() + 1e-12))
        .fold(0.0, f64::max)
}

/// max_i |fd_i − g_i| / max(|g_i|, 10⁻³·max_j |g_j|): relative per
/// component, except that components far below the largest are judged
/// against a floor, where finite-difference round-off would dominate.
pub fn scaled_relative_error(grad: &[f64], fd: &[f64]) -> f64 {
    let scale = grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    grad.iter()
        .zip(fd)
        .map(|(g, d)| (d - g).abs() / g.abs().max(floor))
        .fold(0.0, f64::max)
}

/// Compares the tape gradient of `f` at `x` with central differences of step `h`.
pub fn fd_check<F: ScalarFn + ?Sized>(f: &F, x: &[f64], h: f64) -> Result<f64, FdError> {
    let (v, g) = value_and_grad(f, x)?;
    if !v.is_finite() {
        return Err(FdError::NonFinite { coord: 0, value: v });
    }
    let fd = fd_gradient(|p| f.eval::<f64>(p), x, h)?;
    Ok(scaled_relative_error(&g, &fd))
}
