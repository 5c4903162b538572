use serde::{Deserialize, Serialize};

use crate::error::{arg, Result};
use crate::numerics::Matrix;
use crate::scalar::Scalar;

const ROW_SUM_TOLERANCE: f64 = 1e-9;

/// Per-sample class-probability rows with their true labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbBatch<T> {
    pub probs: Matrix<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> ProbBatch<T> {
    pub fn new(probs: Matrix<T>, labels: Vec<usize>) -> Result<Self> {
        if probs.rows() != labels.len() {
            return arg(format!("{} probability rows but {} labels", probs.rows(), labels.len()));
        }
        for (i, &y) in labels.iter().enumerate() {
            validate_row(probs.row(i), y).map_err(|e| crate::Error::Argument(format!("row {i}: {e}")))?;
        }
        Ok(Self { probs, labels })
    }

    pub fn from_rows(rows: &[Vec<T>], labels: Vec<usize>) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.probs.cols()
    }

    pub fn row(&self, i: usize) -> &[T] {
        self.probs.row(i)
    }
}

/// Checks that `row` is a probability vector and `label` indexes into it.
pub fn validate_row<T: Scalar>(row: &[T], label: usize) -> std::result::Result<(), String> {
    if row.is_empty() {
        return Err("empty probability row".into());
    }
    if label >= row.len() {
        return Err(format!("label {label} out of range for {} classes", row.len()));
    }
    if row.iter().any(|&p| !p.is_finite() || p < T::zero()) {
        return Err("probabilities must be finite and non-negative".into());
    }
    let sum: f64 = row.iter().map(|p| p.as_f64()).sum();
    if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
        return Err(format!("probabilities sum to {sum}, not 1"));
    }
    Ok(())
}

/// Index of the largest entry, lowest index on exact ties.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_invalid_rows() {
        assert!(ProbBatch::from_rows(&[vec![0.5, 0.6]], vec![0]).is_err());
        assert!(ProbBatch::from_rows(&[vec![1.2, -0.2]], vec![0]).is_err());
        assert!(ProbBatch::from_rows(&[vec![0.5, 0.5]], vec![2]).is_err());
        assert!(ProbBatch::from_rows(&[vec![0.5, 0.5]], vec![0, 1]).is_err());
        assert!(ProbBatch::from_rows(&[vec![0.5, 0.5]], vec![1]).is_ok());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[0.1, 0.2, 0.7]), 2);
    }
}
