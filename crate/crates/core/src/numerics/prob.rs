//! Stable probability kernels and the cosine similarity kernel.

use crate::error::{arg, Error, Result};
use crate::numerics::linalg::{dot, norm, Vector};
use crate::scalar::Scalar;

fn max_of<T: Scalar>(z: &[T]) -> T {
    z.iter().copied().fold(T::neg_infinity(), T::max)
}

/// Max-shifted softmax.
pub fn softmax<T: Scalar>(z: &[T]) -> Result<Vector<T>> {
    if z.is_empty() {
        return arg("softmax of an empty vector");
    }
    let m = max_of(z);
    let exps: Vec<T> = z.iter().map(|&v| (v - m).exp()).collect();
    let total: T = exps.iter().copied().sum();
    Ok(exps.into_iter().map(|e| e / total).collect::<Vec<_>>().into())
}

/// `log Σ exp(z_i)`, max-shifted.
pub fn log_sum_exp<T: Scalar>(z: &[T]) -> Result<T> {
    if z.is_empty() {
        return arg("log_sum_exp of an empty vector");
    }
    let m = max_of(z);
    if m == T::infinity() {
        return Ok(m);
    }
    Ok(m + z.iter().map(|&v| (v - m).exp()).sum::<T>().ln())
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn cosine_similarity<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return arg(format!("cosine of vectors with lengths {} and {}", a.len(), b.len()));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == T::zero() || nb == T::zero() {
        return Err(Error::Degenerate("cosine similarity of a zero-norm vector".into()));
    }
    Ok((dot(a, b) / (na * nb)).max(-T::one()).min(T::one()))
}

/// Cosine similarity together with its partial derivatives with respect to
/// both arguments:
/// `∂c/∂a = b/(‖a‖‖b‖) − c·a/‖a‖²` and symmetrically for `b`.
///
/// The value is not clamped here so that value and gradient stay consistent.
pub fn cosine_with_grad<T: Scalar>(a: &[T], b: &[T]) -> Result<(T, Vector<T>, Vector<T>)> {
    if a.len() != b.len() {
        return arg(format!("cosine of vectors with lengths {} and {}", a.len(), b.len()));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == T::zero() || nb == T::zero() {
        return Err(Error::Degenerate("cosine similarity of a zero-norm vector".into()));
    }
    let inv = T::one() / (na * nb);
    let c = dot(a, b) * inv;
    let ga = a
        .iter()
        .zip(b)
        .map(|(&ai, &bi)| bi * inv - c * ai / (na * na))
        .collect::<Vec<_>>();
    let gb = a
        .iter()
        .zip(b)
        .map(|(&ai, &bi)| ai * inv - c * bi / (nb * nb))
        .collect::<Vec<_>>();
    Ok((c, ga.into(), gb.into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap().to_vec(), vec![0.5, 0.5]);
        let p = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
        let p = softmax(&[1000.0f64, 0.0]).unwrap();
        assert!(p.is_finite());
        assert!((p[0] - 1.0).abs() < 1e-15 && p[1] < 1e-300);
        assert!(softmax::<f64>(&[]).is_err());
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn log_sum_exp_examples() {
        assert_eq!(log_sum_exp(&[0.0]).unwrap(), 0.0);
        assert!((log_sum_exp(&[0.0f64, 0.0]).unwrap() - 0.693_147).abs() < 1e-6);
        let v = log_sum_exp(&[1000.0, 1000.0]).unwrap();
        assert!((v - (1000.0 + 2f64.ln())).abs() <= 1e-12 * 1000.0);
        assert!(log_sum_exp::<f64>(&[]).is_err());
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0f64, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - 0.707_11).abs() < 1e-5);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::Degenerate(_))
        ));
        assert!(cosine_similarity(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn cosine_grad_matches_central_difference() {
        let a = [0.3f64, -1.2, 0.7];
        let b = [1.1f64, 0.4, -0.5];
        let (_, ga, gb) = cosine_with_grad(&a, &b).unwrap();
        let h = 1e-6f64;
        for i in 0..3 {
            let mut ap = a;
            let mut am = a;
            ap[i] += h;
            am[i] -= h;
            let fd = (cosine_similarity(&ap, &b).unwrap() - cosine_similarity(&am, &b).unwrap()) / (2.0 * h);
            assert!((fd - ga[i]).abs() < 1e-8);
            let mut bp = b;
            let mut bm = b;
            bp[i] += h;
            bm[i] -= h;
            let fd = (cosine_similarity(&a, &bp).unwrap() - cosine_similarity(&a, &bm).unwrap()) / (2.0 * h);
            assert!((fd - gb[i]).abs() < 1e-8);
        }
    }

    fn magnitude_vec() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(
            (prop::sample::select(vec![1e-8, 1e-4, 1.0, 1e2, 1e3]), -1.0f64..1.0).prop_map(|(m, u)| m * u),
            1..12,
        )
    }

    proptest! {
        #[test]
        fn softmax_is_probability_vector(z in magnitude_vec()) {
            let p = softmax(&z).unwrap();
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn softmax_shift_invariant(z in magnitude_vec(), c in -500.0f64..500.0) {
            let p = softmax(&z).unwrap();
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(q.iter()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn softmax_preserves_order(z in magnitude_vec()) {
            let p = softmax(&z).unwrap();
            for i in 0..z.len() {
                for j in 0..z.len() {
                    if z[i] > z[j] {
                        prop_assert!(p[i] >= p[j]);
                    }
                }
            }
        }

        #[test]
        fn log_sum_exp_bounds(z in magnitude_vec()) {
            let v = log_sum_exp(&z).unwrap();
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let slack = 1e-12 * m.abs().max(1.0);
            prop_assert!(v >= m - slack);
            prop_assert!(v <= m + (z.len() as f64).ln() + slack);
        }
    }
}
