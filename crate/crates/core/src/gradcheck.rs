//! Central-difference validation of analytic gradients.

use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Compare the analytic gradient of `f` against central differences.
///
/// `f` evaluates the scalar objective and its analytic gradient at the
/// given parameter vector. Returns the maximum over parameters of
/// `|analytic - central| / (|central| + 1e-8)`.
pub fn check_gradients<F>(mut f: F, params: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument {
            what: "eps must lie in [1e-6, 1e-3]",
        });
    }
    let (_, analytic) = f(params)?;
    if analytic.len() != params.len() {
        return Err(Error::LengthMismatch {
            expected: params.len(),
            got: analytic.len(),
        });
    }
    for (i, g) in analytic.iter().enumerate() {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient { index: i });
        }
    }
    let mut worst = 0.0f64;
    let mut work = params.to_vec();
    for i in 0..params.len() {
        work[i] = params[i] + eps;
        let fp = f(&work)?.0;
        work[i] = params[i] - eps;
        let fm = f(&work)?.0;
        work[i] = params[i];
        let central = (fp - fm) / (2.0 * eps);
        let rel = (analytic[i] - central).abs() / (central.abs() + 1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
