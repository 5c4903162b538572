//! Central finite-difference gradient oracle.

use crate::error::{arg, Error, Result};
use crate::numerics::linalg::Vector;
use crate::scalar::Scalar;

/// Central-difference gradient `(f(θ + h eᵢ) − f(θ − h eᵢ)) / 2h` for every coordinate.
///
/// Fails with [`Error::NonFinite`] naming the first coordinate whose probe
/// evaluates to NaN or infinity.
pub fn fd_gradient<T, F>(mut f: F, theta: &[T], h: T) -> Result<Vector<T>>
where
    T: Scalar,
    F: FnMut(&[T]) -> T,
{
    if !(h > T::zero()) {
        return arg("finite-difference step must be positive");
    }
    let two_h = h + h;
    let mut probe = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        probe[i] = theta[i] + h;
        let plus = f(&probe);
        probe[i] = theta[i] - h;
        let minus = f(&probe);
        probe[i] = theta[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite { coordinate: i });
        }
        grad.push((plus - minus) / two_h);
    }
    Ok(grad.into())
}

/// Largest coordinatewise relative error `|a − b| / max(|b|, floor)`.
///
/// `floor` keeps coordinates whose reference is (numerically) zero from
/// dominating; those are judged on absolute error instead.
pub fn max_relative_error(analytic: &[f64], reference: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), reference.len());
    analytic
        .iter()
        .zip(reference)
        .map(|(a, r)| (a - r).abs() / r.abs().max(floor))
        .fold(0.0, f64::max)
}
