//! Symmetric image/text contrastive loss.

use crate::error::{arg, Result};
use crate::numerics::{log_sum_exp, softmax, Matrix};
use crate::scalar::Scalar;

/// `½(L_txt + L_img)` over an `N × N` similarity matrix whose entry `(i, j)`
/// is `sim(t_i, i_j)`; matching pairs sit on the diagonal.
pub fn contrastive_loss<T: Scalar>(sim: &Matrix<T>, tau: T) -> Result<T> {
    if !(tau > T::zero()) {
        return arg("temperature must be positive");
    }
    Ok(contrastive_with_grad(sim, T::one() / tau)?.0)
}

/// Loss value, `∂L/∂sim`, and `∂L/∂log τ`.
///
/// Rows give the text-to-image cross-entropies, columns the image-to-text ones.
pub(crate) fn contrastive_with_grad<T: Scalar>(sim: &Matrix<T>, inv_tau: T) -> Result<(T, Matrix<T>, T)> {
    let n = sim.rows();
    if n == 0 || sim.cols() != n {
        return arg(format!(
            "similarity matrix must be square and non-empty, got {}x{}",
            sim.rows(),
            sim.cols()
        ));
    }
    let logits = Matrix::from_row_major(n, n, sim.as_slice().iter().map(|&s| s * inv_tau).collect())?;
    let cols = logits.transpose();
    let nf = T::from_usize_lossy(n);
    let half_over_n = T::lit(0.5) / nf;

    let mut loss = T::zero();
    // ∂L/∂logits
    let mut grad = Matrix::zeros(n, n);
    for i in 0..n {
        let row = logits.row(i);
        loss = loss + log_sum_exp(row)? - row[i];
        for (j, p) in softmax(row)?.iter().enumerate() {
            grad[(i, j)] = grad[(i, j)] + half_over_n * *p;
        }
        grad[(i, i)] = grad[(i, i)] - half_over_n;

        let col = cols.row(i);
        loss = loss + log_sum_exp(col)? - col[i];
        for (r, p) in softmax(col)?.iter().enumerate() {
            grad[(r, i)] = grad[(r, i)] + half_over_n * *p;
        }
        grad[(i, i)] = grad[(i, i)] - half_over_n;
    }
    let loss = loss * half_over_n;

    let mut d_log_tau = T::zero();
    for (g, &z) in grad.as_mut_slice().iter_mut().zip(logits.as_slice()) {
        d_log_tau = d_log_tau - *g * z;
        *g = *g * inv_tau;
    }
    Ok((loss, grad, d_log_tau))
}
