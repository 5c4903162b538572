use serde::{Deserialize, Serialize};

use crate::error::{arg, Result};
use crate::numerics::{Matrix, RngStream, Vector};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            embed_dim: 8,
            num_classes: 3,
        }
    }
}

impl Dims {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.embed_dim == 0 || self.num_classes == 0 {
            return arg(format!("all dimensions must be positive: {self:?}"));
        }
        Ok(())
    }

    /// Length of the full checkpoint vector (trainable and frozen groups).
    pub fn checkpoint_len(&self) -> usize {
        self.embed_dim * self.feature_dim + self.embed_dim + self.num_classes * self.embed_dim + self.embed_dim + 1
    }
}

/// Which parameter groups receive gradient updates and enter the Fisher penalty.
///
/// The frozen class-token matrix is never trainable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trainable {
    pub image_weights: bool,
    pub image_bias: bool,
    pub context: bool,
    pub log_tau: bool,
}

impl Default for Trainable {
    fn default() -> Self {
        Self::all()
    }
}

impl Trainable {
    pub const fn all() -> Self {
        Self {
            image_weights: true,
            image_bias: true,
            context: true,
            log_tau: true,
        }
    }

    /// Pure prompt tuning: only the shared context vector moves.
    pub const fn context_only() -> Self {
        Self {
            image_weights: false,
            image_bias: false,
            context: true,
            log_tau: false,
        }
    }

    pub fn count(&self, dims: &Dims) -> usize {
        let mut n = 0;
        if self.image_weights {
            n += dims.embed_dim * dims.feature_dim;
        }
        if self.image_bias {
            n += dims.embed_dim;
        }
        if self.context {
            n += dims.embed_dim;
        }
        if self.log_tau {
            n += 1;
        }
        n
    }

    pub fn is_empty(&self) -> bool {
        !(self.image_weights || self.image_bias || self.context || self.log_tau)
    }
}

/// All quantities of the dual encoder.
///
/// * `w_img` (`embed_dim × feature_dim`) and `b_img` form the linear image encoder.
/// * `class_base` (`num_classes × embed_dim`) holds frozen class-token embeddings.
/// * `context` is one learnable prompt vector shared by every class.
/// * `log_tau` parameterizes the temperature `τ = exp(log_tau)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams<T> {
    pub w_img: Matrix<T>,
    pub b_img: Vector<T>,
    pub class_base: Matrix<T>,
    pub context: Vector<T>,
    pub log_tau: T,
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(dims: Dims) -> Self {
        Self {
            w_img: Matrix::zeros(dims.embed_dim, dims.feature_dim),
            b_img: Vector::zeros(dims.embed_dim),
            class_base: Matrix::zeros(dims.num_classes, dims.embed_dim),
            context: Vector::zeros(dims.embed_dim),
            log_tau: T::zero(),
        }
    }

    /// Gaussian entries with standard deviation `scale`; `log_tau` is left at 0.
    pub fn random(dims: Dims, scale: f64, rng: &mut RngStream) -> Self {
        let mut p = Self::zeros(dims);
        let mut draw = || T::lit(scale * rng.normal());
        p.w_img.as_mut_slice().iter_mut().for_each(|v| *v = draw());
        p.b_img.iter_mut().for_each(|v| *v = draw());
        p.class_base.as_mut_slice().iter_mut().for_each(|v| *v = draw());
        p.context.iter_mut().for_each(|v| *v = draw());
        p
    }

    pub fn dims(&self) -> Dims {
        Dims {
            feature_dim: self.w_img.cols(),
            embed_dim: self.w_img.rows(),
            num_classes: self.class_base.rows(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dims();
        d.validate()?;
        if self.b_img.len() != d.embed_dim || self.context.len() != d.embed_dim || self.class_base.cols() != d.embed_dim
        {
            return arg("inconsistent parameter dimensions");
        }
        if !self.log_tau.is_finite() {
            return arg("log_tau must be finite");
        }
        Ok(())
    }

    pub fn tau(&self) -> T {
        self.log_tau.exp()
    }

    pub fn is_finite(&self) -> bool {
        self.w_img.is_finite()
            && self.b_img.is_finite()
            && self.class_base.is_finite()
            && self.context.is_finite()
            && self.log_tau.is_finite()
    }

    /// Trainable groups concatenated in the order
    /// `w_img` (row-major), `b_img`, `context`, `log_tau`.
    pub fn flatten(&self, mask: &Trainable) -> Vector<T> {
        let mut out = Vec::with_capacity(mask.count(&self.dims()));
        if mask.image_weights {
            out.extend_from_slice(self.w_img.as_slice());
        }
        if mask.image_bias {
            out.extend_from_slice(&self.b_img);
        }
        if mask.context {
            out.extend_from_slice(&self.context);
        }
        if mask.log_tau {
            out.push(self.log_tau);
        }
        out.into()
    }

    /// Inverse of [`ModelParams::flatten`]; frozen groups are left untouched.
    pub fn unflatten(&mut self, mask: &Trainable, flat: &[T]) -> Result<()> {
        let expected = mask.count(&self.dims());
        if flat.len() != expected {
            return arg(format!(
                "flat parameter vector has {} entries, expected {expected}",
                flat.len()
            ));
        }
        let mut rest = flat;
        let mut take = |n: usize| {
            let (head, tail) = rest.split_at(n);
            rest = tail;
            head
        };
        if mask.image_weights {
            let n = self.w_img.as_slice().len();
            self.w_img.as_mut_slice().copy_from_slice(take(n));
        }
        if mask.image_bias {
            let n = self.b_img.len();
            self.b_img.copy_from_slice(take(n));
        }
        if mask.context {
            let n = self.context.len();
            self.context.copy_from_slice(take(n));
        }
        if mask.log_tau {
            self.log_tau = take(1)[0];
        }
        Ok(())
    }

    pub fn with_flat(&self, mask: &Trainable, flat: &[T]) -> Result<Self> {
        let mut p = self.clone();
        p.unflatten(mask, flat)?;
        Ok(p)
    }

    /// Every group including the frozen class tokens:
    /// `w_img`, `b_img`, `class_base`, `context`, `log_tau`.
    pub fn checkpoint_vector(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.dims().checkpoint_len());
        out.extend_from_slice(self.w_img.as_slice());
        out.extend_from_slice(&self.b_img);
        out.extend_from_slice(self.class_base.as_slice());
        out.extend_from_slice(&self.context);
        out.push(self.log_tau);
        out
    }

    pub fn from_checkpoint_vector(dims: Dims, v: &[T]) -> Result<Self> {
        dims.validate()?;
        if v.len() != dims.checkpoint_len() {
            return arg(format!(
                "checkpoint vector has {} entries, expected {}",
                v.len(),
                dims.checkpoint_len()
            ));
        }
        let (e, d, k) = (dims.embed_dim, dims.feature_dim, dims.num_classes);
        let (w, rest) = v.split_at(e * d);
        let (b, rest) = rest.split_at(e);
        let (base, rest) = rest.split_at(k * e);
        let (ctx, rest) = rest.split_at(e);
        Ok(Self {
            w_img: Matrix::from_row_major(e, d, w.to_vec())?,
            b_img: Vector::from_slice(b),
            class_base: Matrix::from_row_major(k, e, base.to_vec())?,
            context: Vector::from_slice(ctx),
            log_tau: rest[0],
        })
    }
}

/// Gradient with the same layout as the trainable groups of [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad<T> {
    pub w_img: Matrix<T>,
    pub b_img: Vector<T>,
    pub context: Vector<T>,
    pub log_tau: T,
}

impl<T: Scalar> ParamGrad<T> {
    pub fn zeros(dims: Dims) -> Self {
        Self {
            w_img: Matrix::zeros(dims.embed_dim, dims.feature_dim),
            b_img: Vector::zeros(dims.embed_dim),
            context: Vector::zeros(dims.embed_dim),
            log_tau: T::zero(),
        }
    }

    pub fn add_scaled(&mut self, alpha: T, other: &Self) {
        for (a, &b) in self.w_img.as_mut_slice().iter_mut().zip(other.w_img.as_slice()) {
            *a = *a + alpha * b;
        }
        self.b_img.axpy(alpha, &other.b_img);
        self.context.axpy(alpha, &other.context);
        self.log_tau = self.log_tau + alpha * other.log_tau;
    }

    /// Trainable coordinates in [`ModelParams::flatten`] order.
    pub fn flatten(&self, mask: &Trainable) -> Vector<T> {
        let mut out = Vec::new();
        if mask.image_weights {
            out.extend_from_slice(self.w_img.as_slice());
        }
        if mask.image_bias {
            out.extend_from_slice(&self.b_img);
        }
        if mask.context {
            out.extend_from_slice(&self.context);
        }
        if mask.log_tau {
            out.push(self.log_tau);
        }
        out.into()
    }
}
