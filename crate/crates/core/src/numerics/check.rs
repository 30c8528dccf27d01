//! Central finite-difference gradient oracle.

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Compare an analytic gradient against central finite differences of `f`
/// around `x`, coordinate by coordinate.
///
/// Returns the max over coordinates of
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
/// Non-finite values abort with a numeric error naming the coordinate.
pub fn finite_diff_check<T: Real, F>(
    mut f: F,
    x: &Tensor<T>,
    analytic: &[T],
    eps: f64,
) -> Result<f64>
where
    F: FnMut(&Tensor<T>) -> T,
{
    if eps <= 0.0 {
        return Err(Error::contract("finite_diff_check requires eps > 0"));
    }
    if analytic.len() != x.numel() {
        return Err(Error::contract(format!(
            "analytic gradient has {} entries for a {}-element tensor",
            analytic.len(),
            x.numel()
        )));
    }
    let step = T::from_f64(eps);
    let mut probe = x.clone();
    let mut max_rel = 0.0f64;
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe).to_f64();
        probe.data_mut()[i] = orig - step;
        let down = f(&probe).to_f64();
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[i].to_f64();
        if !numeric.is_finite() || !a.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient at coordinate {i}: analytic {a}, numeric {numeric}"
            )));
        }
        let rel = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
