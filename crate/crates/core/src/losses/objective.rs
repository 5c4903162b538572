use serde::{Deserialize, Serialize};

use crate::error::{arg, Result};
use crate::losses::cmp::{cmp_logit_grad, cmp_penalty_variant, CmpVariant};
use crate::losses::contrastive::contrastive_with_grad;
use crate::losses::fisher::{empirical_fisher_trace, fisher_penalty_gradient, sample_scores};
use crate::model::{Batch, BatchForward, ModelParams, Trainable};
use crate::numerics::{Matrix, Vector};
use crate::scalar::Scalar;

/// Terms of `L_c + λ₁·I(θ) + λ₂·CMP` for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown<T> {
    pub contrastive: T,
    pub fisher: T,
    pub cmp: T,
    pub total: T,
    pub lambda1: T,
    pub lambda2: T,
}

impl<T: Scalar> LossBreakdown<T> {
    pub fn compose(contrastive: T, fisher: T, cmp: T, lambda1: T, lambda2: T) -> Self {
        Self {
            contrastive,
            fisher,
            cmp,
            total: contrastive + lambda1 * fisher + lambda2 * cmp,
            lambda1,
            lambda2,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.contrastive.is_finite() && self.fisher.is_finite() && self.cmp.is_finite() && self.total.is_finite()
    }
}

/// Penalty weights plus the choices that shape the objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Parameter groups that are differentiated and enter the Fisher penalty.
    pub trainable: Trainable,
    pub cmp_variant: CmpVariant,
}

impl Objective {
    pub fn new(lambda1: f64, lambda2: f64) -> Self {
        Self {
            lambda1,
            lambda2,
            trainable: Trainable::all(),
            cmp_variant: CmpVariant::TrueClass,
        }
    }

    pub fn with_trainable(mut self, trainable: Trainable) -> Self {
        self.trainable = trainable;
        self
    }

    fn validate<T: Scalar>(&self, batch: &Batch<T>) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) || !self.lambda1.is_finite() || !self.lambda2.is_finite() {
            return arg(format!(
                "penalty weights must be finite and non-negative, got {} and {}",
                self.lambda1, self.lambda2
            ));
        }
        if batch.is_empty() {
            return arg("objective of an empty batch");
        }
        Ok(())
    }

    pub fn loss<T: Scalar>(&self, params: &ModelParams<T>, batch: &Batch<T>) -> Result<LossBreakdown<T>> {
        self.validate(batch)?;
        let dims = params.dims();
        batch.check_against(dims.num_classes, dims.feature_dim)?;
        let fwd = BatchForward::new(params, &batch.features)?;
        let (contrastive, _, _) = contrastive_with_grad(&pair_similarities(&fwd, &batch.labels), fwd.inv_tau)?;
        let pb = fwd.prob_batch(&batch.labels)?;
        let cmp = cmp_penalty_variant(&pb, self.cmp_variant)?;
        let fisher = empirical_fisher_trace(sample_scores(params, batch, &self.trainable)?)?;
        Ok(LossBreakdown::compose(
            contrastive,
            fisher,
            cmp,
            T::lit(self.lambda1),
            T::lit(self.lambda2),
        ))
    }

    /// Gradient of the total in [`ModelParams::flatten`] coordinates of the
    /// trainable groups. Contrastive and CMP parts are analytic; the Fisher part
    /// comes from [`fisher_penalty_gradient`].
    pub fn gradient<T: Scalar>(&self, params: &ModelParams<T>, batch: &Batch<T>) -> Result<Vector<T>> {
        self.validate(batch)?;
        let dims = params.dims();
        batch.check_against(dims.num_classes, dims.feature_dim)?;
        let fwd = BatchForward::new(params, &batch.features)?;

        let (_, d_sim, mut d_log_tau) = contrastive_with_grad(&pair_similarities(&fwd, &batch.labels), fwd.inv_tau)?;
        let mut grad_cos = Matrix::zeros(fwd.num_classes(), fwd.len());
        for (i, &y) in batch.labels.iter().enumerate() {
            for j in 0..fwd.len() {
                grad_cos[(y, j)] = grad_cos[(y, j)] + d_sim[(i, j)];
            }
        }

        if self.lambda2 > 0.0 {
            let lambda2 = T::lit(self.lambda2);
            let pb = fwd.prob_batch(&batch.labels)?;
            let (cmp_cos, cmp_tau) = fwd.logit_grad_to_cos(&cmp_logit_grad(&pb, self.cmp_variant));
            for (g, &c) in grad_cos.as_mut_slice().iter_mut().zip(cmp_cos.as_slice()) {
                *g = *g + lambda2 * c;
            }
            d_log_tau = d_log_tau + lambda2 * cmp_tau;
        }

        let mut grad = fwd
            .backward(&batch.features, &grad_cos, d_log_tau)
            .flatten(&self.trainable);
        if self.lambda1 > 0.0 {
            let fisher = fisher_penalty_gradient(params, batch, &self.trainable)?;
            grad.axpy(T::lit(self.lambda1), &fisher);
        }
        Ok(grad)
    }
}

/// `N × N` matrix pairing image `j` with the class prototype of sample `i`:
/// entry `(i, j) = cos(g_{y_i}, f(x_j))`.
fn pair_similarities<T: Scalar>(fwd: &BatchForward<T>, labels: &[usize]) -> Matrix<T> {
    let n = labels.len();
    let mut sim = Matrix::zeros(n, n);
    for (i, &y) in labels.iter().enumerate() {
        sim.row_mut(i).copy_from_slice(fwd.cos.row(y));
    }
    sim
}

/// Contrastive loss of the batch's image/prototype pairing.
pub fn batch_contrastive<T: Scalar>(params: &ModelParams<T>, batch: &Batch<T>) -> Result<T> {
    let fwd = BatchForward::new(params, &batch.features)?;
    Ok(contrastive_with_grad(&pair_similarities(&fwd, &batch.labels), fwd.inv_tau)?.0)
}

pub fn calshift_loss<T: Scalar>(
    params: &ModelParams<T>,
    batch: &Batch<T>,
    lambda1: f64,
    lambda2: f64,
) -> Result<LossBreakdown<T>> {
    Objective::new(lambda1, lambda2).loss(params, batch)
}

pub fn calshift_gradient<T: Scalar>(
    params: &ModelParams<T>,
    batch: &Batch<T>,
    lambda1: f64,
    lambda2: f64,
) -> Result<Vector<T>> {
    Objective::new(lambda1, lambda2).gradient(params, batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{cmp_penalty, fisher_penalty};
    use crate::model::{predict_probs, Dims};
    use crate::numerics::{fd_gradient, RngStream};

    fn small_problem(seed: u64) -> (ModelParams<f64>, Batch<f64>) {
        let dims = Dims {
            feature_dim: 3,
            embed_dim: 2,
            num_classes: 3,
        };
        let mut rng = RngStream::new(seed);
        let mut p = ModelParams::random(dims, 1.0, &mut rng);
        p.log_tau = -0.5;
        let rows: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| rng.normal()).collect()).collect();
        let labels = (0..5).map(|_| rng.index(3)).collect();
        (p, Batch::new(Matrix::from_rows(&rows).unwrap(), labels).unwrap())
    }

    #[test]
    fn zero_lambdas_give_contrastive_only() {
        let (p, b) = small_problem(1);
        let l = calshift_loss(&p, &b, 0.0, 0.0).unwrap();
        assert_eq!(l.total, l.contrastive);
    }

    #[test]
    fn recomposes_from_independent_terms() {
        let (p, b) = small_problem(2);
        let l = calshift_loss(&p, &b, 0.4, 0.4).unwrap();
        let c = batch_contrastive(&p, &b).unwrap();
        let f = fisher_penalty(&p, &b).unwrap();
        let m = cmp_penalty(&predict_probs(&p, &b).unwrap()).unwrap();
        assert!((l.total - (c + 0.4 * f + 0.4 * m)).abs() < 1e-12);
    }

    #[test]
    fn negative_lambda_rejected() {
        let (p, b) = small_problem(3);
        assert!(calshift_loss(&p, &b, -0.1, 0.0).is_err());
        assert!(calshift_gradient(&p, &b, 0.0, -1.0).is_err());
    }

    #[test]
    fn gradient_matches_fd_for_several_weights() {
        for (seed, l1, l2) in [(4, 0.0, 0.0), (5, 1.0, 0.0), (6, 0.0, 1.0), (7, 0.4, 0.7)] {
            let (p, b) = small_problem(seed);
            let mask = Trainable::all();
            let g = calshift_gradient(&p, &b, l1, l2).unwrap();
            let f = |t: &[f64]| {
                calshift_loss(&p.with_flat(&mask, t).unwrap(), &b, l1, l2)
                    .unwrap()
                    .total
            };
            let fd = fd_gradient(f, &p.flatten(&mask), 1e-4).unwrap();
            for (a, r) in g.iter().zip(fd.iter()) {
                assert!((a - r).abs() <= 1e-6 * r.abs().max(1.0), "seed {seed}: {a} vs {r}");
            }
        }
    }

    #[test]
    fn symmetric_prototypes_give_zero_context_gradient() {
        // Identical prototypes and identical images: every similarity is equal
        // and every softmax uniform.
        let (mut p, b) = small_problem(9);
        let first_row = b.row(0).to_vec();
        let b = Batch::new(Matrix::from_rows(&vec![first_row; 5]).unwrap(), b.labels.clone()).unwrap();
        for k in 1..3 {
            let first = p.class_base.row(0).to_vec();
            p.class_base.row_mut(k).copy_from_slice(&first);
        }
        let mask = Trainable::context_only();
        let g = Objective::new(0.0, 0.0).with_trainable(mask).gradient(&p, &b).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-15), "{g:?}");
    }
}
