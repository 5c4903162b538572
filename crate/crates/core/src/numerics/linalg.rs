//! Dense vectors and row-major matrices.

use std::ops::{Deref, DerefMut, Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::scalar::Scalar;

/// Owned dense vector.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector<T>(Vec<T>);

impl<T: Scalar> Vector<T> {
    pub fn zeros(len: usize) -> Self {
        Self(vec![T::zero(); len])
    }

    pub fn filled(len: usize, value: T) -> Self {
        Self(vec![value; len])
    }

    pub fn from_slice(values: &[T]) -> Self {
        Self(values.to_vec())
    }

    pub fn into_inner(self) -> Vec<T> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> T {
        norm(&self.0)
    }

    pub fn scaled(&self, factor: T) -> Self {
        Self(self.0.iter().map(|&v| v * factor).collect())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: T, other: &[T]) {
        assert_eq!(self.len(), other.len(), "axpy length mismatch");
        for (a, &b) in self.0.iter_mut().zip(other) {
            *a = *a + alpha * b;
        }
    }
}

impl<T> From<Vec<T>> for Vector<T> {
    fn from(v: Vec<T>) -> Self {
        Self(v)
    }
}

impl<T> Deref for Vector<T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        &self.0
    }
}

impl<T> DerefMut for Vector<T> {
    fn deref_mut(&mut self) -> &mut [T] {
        &mut self.0
    }
}

/// Row-major dense matrix. `rows * cols == data.len()` always holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows * cols != data.len() {
            return arg(format!(
                "matrix {rows}x{cols} needs {} elements, got {}",
                rows * cols,
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return arg("ragged rows");
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::from_row_major(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_inner(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t[(c, r)] = self[(r, c)];
            }
        }
        t
    }

    /// `self · x`
    pub fn matvec(&self, x: &[T]) -> Result<Vector<T>> {
        if x.len() != self.cols {
            return arg(format!(
                "matvec: matrix has {} columns, vector has {} entries",
                self.cols,
                x.len()
            ));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect::<Vec<_>>().into())
    }

    /// `selfᵀ · y`
    pub fn matvec_transposed(&self, y: &[T]) -> Result<Vector<T>> {
        if y.len() != self.rows {
            return arg(format!(
                "transposed matvec: matrix has {} rows, vector has {} entries",
                self.rows,
                y.len()
            ));
        }
        let mut out = Vector::zeros(self.cols);
        for (r, &yr) in y.iter().enumerate() {
            out.axpy(yr, self.row(r));
        }
        Ok(out)
    }

    /// Rank-one update `self += alpha · u vᵀ`.
    pub fn add_outer(&mut self, alpha: T, u: &[T], v: &[T]) {
        assert_eq!((u.len(), v.len()), (self.rows, self.cols), "outer shape mismatch");
        for (r, &ur) in u.iter().enumerate() {
            let scale = alpha * ur;
            for (a, &vc) in self.row_mut(r).iter_mut().zip(v) {
                *a = *a + scale * vc;
            }
        }
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    fn index(&self, (r, c): (usize, usize)) -> &T {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Solves `A x = b` for symmetric positive-definite `A` by Cholesky factorization.
pub fn cholesky_solve<T: Scalar>(a: &Matrix<T>, b: &[T]) -> Result<Vector<T>> {
    let n = a.rows();
    if a.cols() != n || b.len() != n {
        return arg(format!(
            "cholesky_solve: need square system, got {}x{} with rhs {}",
            a.rows(),
            a.cols(),
            b.len()
        ));
    }
    // Lower factor L with A = L Lᵀ, stored row-major.
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let partial = dot(&l.row(i)[..j], &l.row(j)[..j]);
            if i == j {
                let d = a[(i, i)] - partial;
                if !(d > T::zero()) || !d.is_finite() {
                    return Err(Error::Degenerate(format!("matrix not positive definite at pivot {i}")));
                }
                l[(i, i)] = d.sqrt();
            } else {
                l[(i, j)] = (a[(i, j)] - partial) / l[(j, j)];
            }
        }
    }
    let mut y = vec![T::zero(); n];
    for i in 0..n {
        y[i] = (b[i] - dot(&l.row(i)[..i], &y[..i])) / l[(i, i)];
    }
    let mut x = vec![T::zero(); n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s = s - l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    Ok(x.into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_by_hand() {
        let m = Matrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(m.matvec(&[1.0, 1.0]).unwrap().to_vec(), vec![2.0, 1.0]);
        assert_eq!(m.matvec_transposed(&[1.0, 1.0]).unwrap().to_vec(), vec![1.0, 2.0]);
        assert!(m.matvec(&[1.0]).is_err());
    }

    #[test]
    fn element_count_enforced() {
        assert!(Matrix::<f64>::from_row_major(2, 3, vec![0.0; 5]).is_err());
    }

    #[test]
    fn cholesky_two_by_two() {
        // [[4,2],[2,3]] x = [2,1]  ->  x = [0.5, 0]
        let a = Matrix::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]).unwrap();
        let x = cholesky_solve(&a, &[2.0f64, 1.0]).unwrap();
        assert!((x[0] - 0.5).abs() < 1e-15 && x[1].abs() < 1e-15);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(matches!(cholesky_solve(&a, &[1.0, 1.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn cholesky_generic_f32() {
        let a = Matrix::<f32>::identity(3);
        let x = cholesky_solve(&a, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(x.to_vec(), vec![1.0f32, 2.0, 3.0]);
    }
}
