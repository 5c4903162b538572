//! Objective terms: symmetric contrastive loss, empirical Fisher penalty,
//! confidence misalignment penalty, and their weighted sum with its gradient.

pub mod cmp;
mod contrastive;
pub mod fisher;
mod objective;
mod prob_batch;

pub use cmp::{cmp_penalty, cmp_penalty_variant, cmp_row, cmp_sample, cmp_sample_variant, CmpVariant};
pub use contrastive::contrastive_loss;
pub use fisher::{
    empirical_fisher, empirical_fisher_matrix, empirical_fisher_trace, fisher_penalty, fisher_penalty_gradient,
    fisher_penalty_masked, sample_scores, Bernoulli, LinearSoftmax, ScoreModel,
};
pub use objective::{batch_contrastive, calshift_gradient, calshift_loss, LossBreakdown, Objective};
pub use prob_batch::{argmax, validate_row, ProbBatch};
