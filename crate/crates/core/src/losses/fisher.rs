//! Empirical Fisher information: the penalty is the trace of
//! `(1/n) Σ_i s_i s_iᵀ`, i.e. the mean squared norm of the per-sample score
//! `s_i = ∇_θ log p(y_i | x_i; θ)`.

use crate::error::{arg, Error, Result};
use crate::model::{Batch, BatchForward, ModelParams, Trainable};
use crate::numerics::{dot, softmax, Matrix, Vector};
use crate::scalar::Scalar;

/// Step length, in parameter space, of the central difference used for the
/// Fisher-penalty gradient.
pub const FISHER_GRAD_STEP: f64 = 1e-5;

/// A likelihood whose score can be evaluated sample by sample.
pub trait ScoreModel<T> {
    type Sample;

    /// `∇_θ log p(sample; θ)`
    fn score(&self, sample: &Self::Sample) -> Result<Vector<T>>;
}

/// Mean squared score norm over a stream of score vectors.
pub fn empirical_fisher_trace<T: Scalar>(scores: impl IntoIterator<Item = Vector<T>>) -> Result<T> {
    let mut total = T::zero();
    let mut n = 0usize;
    for s in scores {
        total = total + dot(&s, &s);
        n += 1;
    }
    if n == 0 {
        return arg("empirical Fisher of an empty sample");
    }
    Ok(total / T::from_usize_lossy(n))
}

/// Empirical Fisher trace of any [`ScoreModel`] over observed samples.
pub fn empirical_fisher<T: Scalar, M: ScoreModel<T>>(model: &M, samples: &[M::Sample]) -> Result<T> {
    let scores = samples.iter().map(|s| model.score(s)).collect::<Result<Vec<_>>>()?;
    empirical_fisher_trace(scores)
}

/// Bernoulli family `p(y; θ) = θ^y (1−θ)^(1−y)`.
#[derive(Debug, Clone, Copy)]
pub struct Bernoulli<T> {
    pub theta: T,
}

impl<T: Scalar> Bernoulli<T> {
    pub fn new(theta: T) -> Result<Self> {
        if !(theta > T::zero() && theta < T::one()) {
            return arg("Bernoulli parameter must lie in (0, 1)");
        }
        Ok(Self { theta })
    }

    /// `1 / (θ(1−θ))`
    pub fn fisher(&self) -> T {
        T::one() / (self.theta * (T::one() - self.theta))
    }
}

impl<T: Scalar> ScoreModel<T> for Bernoulli<T> {
    type Sample = bool;

    fn score(&self, &y: &bool) -> Result<Vector<T>> {
        let s = if y {
            T::one() / self.theta
        } else {
            -T::one() / (T::one() - self.theta)
        };
        Ok(vec![s].into())
    }
}

/// Plain linear softmax classifier `p(y|x) = softmax(W x)_y`, scored with
/// respect to `W` (row-major).
#[derive(Debug, Clone)]
pub struct LinearSoftmax<T> {
    pub weights: Matrix<T>,
}

impl<T: Scalar> ScoreModel<T> for LinearSoftmax<T> {
    type Sample = (Vec<T>, usize);

    fn score(&self, (x, y): &Self::Sample) -> Result<Vector<T>> {
        let p = softmax(&self.weights.matvec(x)?)?;
        if *y >= p.len() {
            return arg(format!("label {y} out of range"));
        }
        let mut s = Matrix::zeros(self.weights.rows(), self.weights.cols());
        let residual: Vec<T> = p
            .iter()
            .enumerate()
            .map(|(k, &pk)| if k == *y { T::one() - pk } else { -pk })
            .collect();
        s.add_outer(T::one(), &residual, x);
        Ok(s.into_inner().into())
    }
}

fn log_lik_logit_grad<T: Scalar>(fwd: &BatchForward<T>, j: usize, y: usize) -> Vector<T> {
    let mut g = fwd.probs(j).scaled(-T::one());
    g[y] = g[y] + T::one();
    g
}

/// Per-sample scores of the dual encoder's classification likelihood,
/// restricted to the trainable groups.
pub fn sample_scores<T: Scalar>(params: &ModelParams<T>, batch: &Batch<T>, mask: &Trainable) -> Result<Vec<Vector<T>>> {
    let fwd = BatchForward::new(params, &batch.features)?;
    Ok((0..batch.len())
        .map(|j| {
            fwd.backward_sample(&batch.features, j, &log_lik_logit_grad(&fwd, j, batch.labels[j]))
                .flatten(mask)
        })
        .collect())
}

fn single_score<T: Scalar>(params: &ModelParams<T>, x: &[T], y: usize, mask: &Trainable) -> Result<Vector<T>> {
    let features = Matrix::from_row_major(1, x.len(), x.to_vec())?;
    let fwd = BatchForward::new(params, &features)?;
    Ok(fwd
        .backward_sample(&features, 0, &log_lik_logit_grad(&fwd, 0, y))
        .flatten(mask))
}

/// Fisher penalty over every trainable group.
pub fn fisher_penalty<T: Scalar>(params: &ModelParams<T>, batch: &Batch<T>) -> Result<T> {
    fisher_penalty_masked(params, batch, &Trainable::all())
}

pub fn fisher_penalty_masked<T: Scalar>(params: &ModelParams<T>, batch: &Batch<T>, mask: &Trainable) -> Result<T> {
    if batch.is_empty() {
        return arg("Fisher penalty of an empty batch");
    }
    empirical_fisher_trace(sample_scores(params, batch, mask)?)
}

/// `(1/n) Σ_i s_i s_iᵀ` over the trainable coordinates.
pub fn empirical_fisher_matrix<T: Scalar>(
    params: &ModelParams<T>,
    batch: &Batch<T>,
    mask: &Trainable,
) -> Result<Matrix<T>> {
    if batch.is_empty() {
        return arg("Fisher matrix of an empty batch");
    }
    let scores = sample_scores(params, batch, mask)?;
    let dim = mask.count(&params.dims());
    let mut f = Matrix::zeros(dim, dim);
    let w = T::one() / T::from_usize_lossy(scores.len());
    for s in &scores {
        f.add_outer(w, s, s);
    }
    Ok(f)
}

/// Gradient of the Fisher penalty in trainable coordinates.
///
/// `∇ ‖s_i‖² = 2 H_i s_i` where `H_i` is the Hessian of `log p(y_i|x_i)`.
/// Each Hessian-vector product is a central difference of the score along
/// its own direction: `H_i s_i ≈ (s_i(θ + t s_i) − s_i(θ − t s_i)) / 2t`, with
/// `t·‖s_i‖ = FISHER_GRAD_STEP`.
pub fn fisher_penalty_gradient<T: Scalar>(
    params: &ModelParams<T>,
    batch: &Batch<T>,
    mask: &Trainable,
) -> Result<Vector<T>> {
    if batch.is_empty() {
        return arg("Fisher penalty of an empty batch");
    }
    let theta = params.flatten(mask);
    let scores = sample_scores(params, batch, mask)?;
    let mut grad = Vector::zeros(theta.len());
    let weight = T::lit(2.0) / T::from_usize_lossy(batch.len());
    for (j, s) in scores.iter().enumerate() {
        let s_norm = s.norm();
        if s_norm == T::zero() {
            continue;
        }
        let t = T::lit(FISHER_GRAD_STEP) / s_norm;
        let mut plus = theta.clone();
        plus.axpy(t, s);
        let mut minus = theta.clone();
        minus.axpy(-t, s);
        let (x, y) = (batch.row(j), batch.labels[j]);
        let s_plus = single_score(&params.with_flat(mask, &plus)?, x, y, mask)?;
        let s_minus = single_score(&params.with_flat(mask, &minus)?, x, y, mask)?;
        let inv = weight / (t + t);
        for ((g, &a), &b) in grad.iter_mut().zip(s_plus.iter()).zip(s_minus.iter()) {
            *g = *g + (a - b) * inv;
        }
    }
    if !grad.is_finite() {
        return Err(Error::Degenerate("non-finite Fisher penalty gradient".into()));
    }
    Ok(grad)
}
