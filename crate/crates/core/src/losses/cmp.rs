//! Confidence Misalignment Penalty.
//!
//! For a sample with true class `y`, the dominating set is
//! `S = {y' ≠ y : p(y') > p(y)}` (strict, so ties are excluded). The penalty is
//! `p(y) / Σ_{y'∈S} p(y')`, and `0` when `S` is empty, i.e. whenever the top-1
//! prediction is correct. Values lie in `[0, 1)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::prob_batch::{argmax, validate_row, ProbBatch};
use crate::numerics::Matrix;
use crate::scalar::Scalar;

/// Which class the penalty's numerator refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CmpVariant {
    /// Numerator is the true-class probability.
    #[default]
    TrueClass,
    /// Numerator is the probability of the predicted (arg-max) class and the
    /// dominating set is taken relative to it. Because nothing strictly
    /// exceeds the arg-max, the set is always empty and the value is `0`;
    /// kept for side-by-side comparison only.
    PredictedClass,
}

/// Penalty of one probability row. The row is assumed valid.
pub fn cmp_sample<T: Scalar>(row: &[T], label: usize) -> T {
    cmp_sample_variant(row, label, CmpVariant::TrueClass)
}

pub fn cmp_sample_variant<T: Scalar>(row: &[T], label: usize, variant: CmpVariant) -> T {
    let anchor = match variant {
        CmpVariant::TrueClass => label,
        CmpVariant::PredictedClass => argmax(row),
    };
    let p_anchor = row[anchor];
    let dominating: T = row
        .iter()
        .enumerate()
        .filter(|&(k, &p)| k != anchor && p > p_anchor)
        .map(|(_, &p)| p)
        .sum();
    if dominating == T::zero() {
        T::zero()
    } else {
        p_anchor / dominating
    }
}

/// Validating single-row form.
pub fn cmp_row<T: Scalar>(row: &[T], label: usize) -> Result<T> {
    validate_row(row, label).map_err(Error::Argument)?;
    Ok(cmp_sample(row, label))
}

/// Batch mean of the per-sample penalty.
pub fn cmp_penalty<T: Scalar>(pb: &ProbBatch<T>) -> Result<T> {
    cmp_penalty_variant(pb, CmpVariant::TrueClass)
}

pub fn cmp_penalty_variant<T: Scalar>(pb: &ProbBatch<T>, variant: CmpVariant) -> Result<T> {
    if pb.is_empty() {
        return Err(Error::Argument("penalty of an empty batch".into()));
    }
    let total: T = (0..pb.len())
        .map(|i| cmp_sample_variant(pb.row(i), pb.labels[i], variant))
        .sum();
    Ok(total / T::from_usize_lossy(pb.len()))
}

/// `∂ mean CMP / ∂ logits` as a `num_classes × n` matrix, holding each
/// sample's dominating set fixed.
///
/// With softmax probabilities the normalizer cancels, so per sample
/// `CMP = exp(z_y − log Σ_{s∈S} exp z_s)` and
/// `∂CMP/∂z_k = CMP · (δ_{ky} − q_k·[k∈S])` with `q` the softmax restricted to `S`.
pub(crate) fn cmp_logit_grad<T: Scalar>(pb: &ProbBatch<T>, variant: CmpVariant) -> Matrix<T> {
    let (n, k_count) = (pb.len(), pb.num_classes());
    let mut grad = Matrix::zeros(k_count, n);
    if variant == CmpVariant::PredictedClass {
        return grad;
    }
    let scale = T::one() / T::from_usize_lossy(n.max(1));
    for j in 0..n {
        let row = pb.row(j);
        let y = pb.labels[j];
        let dominating: T = row
            .iter()
            .enumerate()
            .filter(|&(k, &p)| k != y && p > row[y])
            .map(|(_, &p)| p)
            .sum();
        if dominating == T::zero() {
            continue;
        }
        let value = row[y] / dominating;
        grad[(y, j)] = value * scale;
        for (k, &p) in row.iter().enumerate() {
            if k != y && p > row[y] {
                grad[(k, j)] = -value * (p / dominating) * scale;
            }
        }
    }
    grad
}
