//! Encoders, class logits and the cached batch forward pass used by the losses.

use serde::{Deserialize, Serialize};

use crate::error::{arg, Result};
use crate::losses::ProbBatch;
use crate::model::params::{ModelParams, ParamGrad};
use crate::numerics::{cosine_similarity, cosine_with_grad, softmax, Matrix, Vector};
use crate::scalar::Scalar;

/// Feature rows with their class labels. An empty batch marks zero-shot mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch<T> {
    pub features: Matrix<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> Batch<T> {
    pub fn new(features: Matrix<T>, labels: Vec<usize>) -> Result<Self> {
        if features.rows() != labels.len() {
            return arg(format!("{} feature rows but {} labels", features.rows(), labels.len()));
        }
        Ok(Self { features, labels })
    }

    pub fn empty(feature_dim: usize) -> Self {
        Self {
            features: Matrix::zeros(0, feature_dim),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn row(&self, i: usize) -> &[T] {
        self.features.row(i)
    }

    /// Rows selected by index, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let d = self.feature_dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            features: Matrix::from_row_major(indices.len(), d, data).expect("shape by construction"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn check_against(&self, num_classes: usize, feature_dim: usize) -> Result<()> {
        if self.feature_dim() != feature_dim {
            return arg(format!(
                "batch has {} features, model expects {feature_dim}",
                self.feature_dim()
            ));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= num_classes) {
            return arg(format!("label {bad} out of range for {num_classes} classes"));
        }
        Ok(())
    }

    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

pub fn encode_image<T: Scalar>(params: &ModelParams<T>, x: &[T]) -> Result<Vector<T>> {
    let mut u = params.w_img.matvec(x)?;
    u.axpy(T::one(), &params.b_img);
    Ok(u)
}

pub fn encode_class<T: Scalar>(params: &ModelParams<T>, k: usize) -> Result<Vector<T>> {
    if k >= params.class_base.rows() {
        return arg(format!(
            "class index {k} out of range for {} classes",
            params.class_base.rows()
        ));
    }
    let mut v = Vector::from_slice(params.class_base.row(k));
    v.axpy(T::one(), &params.context);
    Ok(v)
}

/// `cos(f(x), g_k) / τ` for every class `k`.
pub fn class_logits<T: Scalar>(params: &ModelParams<T>, x: &[T]) -> Result<Vector<T>> {
    let u = encode_image(params, x)?;
    let inv_tau = (-params.log_tau).exp();
    (0..params.class_base.rows())
        .map(|k| Ok(cosine_similarity(&u, &encode_class(params, k)?)? * inv_tau))
        .collect::<Result<Vec<_>>>()
        .map(Vector::from)
}

pub fn predict_probs<T: Scalar>(params: &ModelParams<T>, batch: &Batch<T>) -> Result<ProbBatch<T>> {
    let dims = params.dims();
    batch.check_against(dims.num_classes, dims.feature_dim)?;
    let fwd = BatchForward::new(params, &batch.features)?;
    fwd.prob_batch(&batch.labels)
}

/// Cached forward pass over a batch: every class embedding against every image
/// embedding, with the cosine partial derivatives kept for backpropagation.
///
/// Both the contrastive similarity matrix (rows picked by label) and the class
/// logits (columns) are views of the same `num_classes × n` cosine table.
#[derive(Debug, Clone)]
pub struct BatchForward<T> {
    pub inv_tau: T,
    pub image_emb: Vec<Vector<T>>,
    pub class_emb: Vec<Vector<T>>,
    /// `cos[(k, j)] = cos(g_k, f(x_j))`
    pub cos: Matrix<T>,
    d_cos_d_img: Vec<Vector<T>>,
    d_cos_d_class: Vec<Vector<T>>,
}

impl<T: Scalar> BatchForward<T> {
    pub fn new(params: &ModelParams<T>, features: &Matrix<T>) -> Result<Self> {
        let k_count = params.class_base.rows();
        let n = features.rows();
        let image_emb = (0..n)
            .map(|j| encode_image(params, features.row(j)))
            .collect::<Result<Vec<_>>>()?;
        let class_emb = (0..k_count)
            .map(|k| encode_class(params, k))
            .collect::<Result<Vec<_>>>()?;
        let mut cos = Matrix::zeros(k_count, n);
        let mut d_cos_d_img = Vec::with_capacity(k_count * n);
        let mut d_cos_d_class = Vec::with_capacity(k_count * n);
        for (k, v) in class_emb.iter().enumerate() {
            for (j, u) in image_emb.iter().enumerate() {
                let (c, gv, gu) = cosine_with_grad(v, u)?;
                cos[(k, j)] = c.max(-T::one()).min(T::one());
                d_cos_d_class.push(gv);
                d_cos_d_img.push(gu);
            }
        }
        Ok(Self {
            inv_tau: (-params.log_tau).exp(),
            image_emb,
            class_emb,
            cos,
            d_cos_d_img,
            d_cos_d_class,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.cos.rows()
    }

    pub fn len(&self) -> usize {
        self.cos.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn logits(&self, j: usize) -> Vector<T> {
        (0..self.num_classes())
            .map(|k| self.cos[(k, j)] * self.inv_tau)
            .collect::<Vec<_>>()
            .into()
    }

    pub fn probs(&self, j: usize) -> Vector<T> {
        softmax(&self.logits(j)).expect("at least one class")
    }

    pub fn prob_batch(&self, labels: &[usize]) -> Result<ProbBatch<T>> {
        let k = self.num_classes();
        let mut data = Vec::with_capacity(self.len() * k);
        for j in 0..self.len() {
            data.extend_from_slice(&self.probs(j));
        }
        ProbBatch::new(Matrix::from_row_major(self.len(), k, data)?, labels.to_vec())
    }

    /// Converts `∂L/∂logits` (`num_classes × n`) into `∂L/∂cos` and the
    /// temperature contribution `∂L/∂log_tau = −Σ ∂L/∂z · z`.
    pub fn logit_grad_to_cos(&self, grad_logits: &Matrix<T>) -> (Matrix<T>, T) {
        let mut grad_cos = grad_logits.clone();
        let mut d_log_tau = T::zero();
        for (g, &c) in grad_cos.as_mut_slice().iter_mut().zip(self.cos.as_slice()) {
            d_log_tau = d_log_tau - *g * c * self.inv_tau;
            *g = *g * self.inv_tau;
        }
        (grad_cos, d_log_tau)
    }

    /// Backpropagates `∂L/∂cos` plus a direct `∂L/∂log_tau` into parameter space.
    pub fn backward(&self, features: &Matrix<T>, grad_cos: &Matrix<T>, grad_log_tau: T) -> ParamGrad<T> {
        let (k_count, n) = (self.num_classes(), self.len());
        let embed_dim = self.class_emb.first().map_or(0, |v| v.len());
        let mut grad = ParamGrad::zeros(crate::model::Dims {
            feature_dim: features.cols(),
            embed_dim,
            num_classes: k_count,
        });
        grad.log_tau = grad_log_tau;
        for j in 0..n {
            let mut d_img = Vector::zeros(embed_dim);
            for k in 0..k_count {
                let g = grad_cos[(k, j)];
                if g == T::zero() {
                    continue;
                }
                d_img.axpy(g, &self.d_cos_d_img[k * n + j]);
                grad.context.axpy(g, &self.d_cos_d_class[k * n + j]);
            }
            grad.w_img.add_outer(T::one(), &d_img, features.row(j));
            grad.b_img.axpy(T::one(), &d_img);
        }
        grad
    }

    /// Backpropagates `∂L/∂logits` of sample `j` alone.
    pub fn backward_sample(&self, features: &Matrix<T>, j: usize, grad_logits: &[T]) -> ParamGrad<T> {
        let k_count = self.num_classes();
        let n = self.len();
        let embed_dim = self.image_emb[j].len();
        let mut grad = ParamGrad::zeros(crate::model::Dims {
            feature_dim: features.cols(),
            embed_dim,
            num_classes: k_count,
        });
        let mut d_img = Vector::zeros(embed_dim);
        for (k, &gz) in grad_logits.iter().enumerate() {
            grad.log_tau = grad.log_tau - gz * self.cos[(k, j)] * self.inv_tau;
            let g = gz * self.inv_tau;
            d_img.axpy(g, &self.d_cos_d_img[k * n + j]);
            grad.context.axpy(g, &self.d_cos_d_class[k * n + j]);
        }
        grad.w_img.add_outer(T::one(), &d_img, features.row(j));
        grad.b_img.axpy(T::one(), &d_img);
        grad
    }
}
