//! Executable checks of the Fisher–KL quadratic relation and of the
//! confidence-misalignment penalty's bounds, zero set and monotonicity.

use serde::{Deserialize, Serialize};

use crate::error::{arg, Result};
use crate::losses::{calshift_gradient, calshift_loss, cmp_sample};
use crate::model::{predict_probs, Batch, Dims, ModelParams, Trainable};
use crate::numerics::{fd_gradient, max_relative_error, softmax, Matrix, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "family")]
pub enum Family {
    /// `N(θ, σ²)` with known `σ`.
    GaussianMean {
        sigma: f64,
    },
    Bernoulli,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticCheckResult {
    pub delta_theta: Vec<f64>,
    pub kl_exact: f64,
    /// `½ Δθᵀ I(θ) Δθ`
    pub quadratic_form: f64,
    pub relative_gap: f64,
}

impl QuadraticCheckResult {
    fn new(delta: f64, kl_exact: f64, fisher: f64) -> Self {
        let quadratic_form = 0.5 * delta * fisher * delta;
        Self {
            delta_theta: vec![delta],
            kl_exact,
            quadratic_form,
            relative_gap: (kl_exact - quadratic_form).abs() / kl_exact.max(1e-300),
        }
    }
}

impl Family {
    fn validate(&self, theta: f64) -> Result<()> {
        match *self {
            Family::GaussianMean { sigma } if !(sigma > 0.0 && sigma.is_finite()) => {
                arg(format!("Gaussian scale must be positive, got {sigma}"))
            }
            Family::GaussianMean { .. } if !theta.is_finite() => arg("Gaussian mean must be finite"),
            Family::Bernoulli if !(theta > 0.0 && theta < 1.0) => {
                arg(format!("Bernoulli parameter must lie in (0, 1), got {theta}"))
            }
            _ => Ok(()),
        }
    }

    pub fn fisher(&self, theta: f64) -> f64 {
        match *self {
            Family::GaussianMean { sigma } => 1.0 / (sigma * sigma),
            Family::Bernoulli => 1.0 / (theta * (1.0 - theta)),
        }
    }

    /// `KL(p_{θ+δ} ‖ p_θ)` in closed form.
    pub fn kl(&self, theta: f64, delta: f64) -> f64 {
        match *self {
            Family::GaussianMean { sigma } => delta * delta / (2.0 * sigma * sigma),
            Family::Bernoulli => {
                let q = theta + delta;
                // Each log ratio written as ln(1 + x) to keep small-δ precision.
                let a = if q > 0.0 { q * (delta / theta).ln_1p() } else { 0.0 };
                let b = if q < 1.0 {
                    (1.0 - q) * (-delta / (1.0 - theta)).ln_1p()
                } else {
                    0.0
                };
                a + b
            }
        }
    }
}

/// Compare the closed-form KL with the Fisher quadratic form at each `δ`.
pub fn fisher_kl_check(family: Family, theta: f64, deltas: &[f64]) -> Result<Vec<QuadraticCheckResult>> {
    family.validate(theta)?;
    deltas
        .iter()
        .map(|&delta| {
            if !delta.is_finite() {
                return arg(format!("step {delta} is not finite"));
            }
            if family == Family::Bernoulli && !(0.0..=1.0).contains(&(theta + delta)) {
                return arg(format!("θ + δ = {} leaves [0, 1]", theta + delta));
            }
            Ok(QuadraticCheckResult::new(
                delta,
                family.kl(theta, delta),
                family.fisher(theta),
            ))
        })
        .collect()
}

/// Halving ladder `δ, δ/2, …` of length `steps`.
pub fn delta_ladder(start: f64, steps: usize) -> Vec<f64> {
    (0..steps).map(|i| start / f64::powi(2.0, i as i32)).collect()
}

/// True when each gap above `floor` is followed by a strictly smaller one.
pub fn gaps_shrink(results: &[QuadraticCheckResult], floor: f64) -> bool {
    results
        .windows(2)
        .all(|w| w[0].relative_gap <= floor || w[1].relative_gap < w[0].relative_gap)
}

/// Label of the bound property; also the text the CLI reports on failure.
pub const CMP_BOUNDS: &str = "cmp bounds";
pub const CMP_ZERO_IFF_CORRECT: &str = "cmp zero iff top-1 correct";
pub const CMP_MONOTONE: &str = "cmp monotone approach";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyOutcome {
    pub property: String,
    pub trials: usize,
    pub failures: usize,
    /// First failing case, as `row | label`.
    pub example: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmpSuiteReport {
    pub trials: usize,
    pub properties: Vec<PropertyOutcome>,
    /// Largest distance by which any value left `[0, 1)`; `0` if none did.
    pub worst_gap: f64,
}

impl CmpSuiteReport {
    pub fn passed(&self) -> bool {
        self.failures() == 0
    }

    pub fn failures(&self) -> usize {
        self.properties.iter().map(|p| p.failures).sum()
    }

    pub fn failing_properties(&self) -> Vec<&str> {
        self.properties
            .iter()
            .filter(|p| p.failures > 0)
            .map(|p| p.property.as_str())
            .collect()
    }
}

/// Property suite against the library penalty.
pub fn cmp_property_suite(rng: &mut RngStream, trials: usize) -> Result<CmpSuiteReport> {
    cmp_property_suite_with(|row: &[f64], y: usize| cmp_sample(row, y), rng, trials)
}

struct Tally {
    outcome: PropertyOutcome,
}

impl Tally {
    fn new(property: &str) -> Self {
        Self {
            outcome: PropertyOutcome {
                property: property.to_string(),
                trials: 0,
                failures: 0,
                example: None,
            },
        }
    }

    fn record(&mut self, ok: bool, row: &[f64], label: usize) {
        self.outcome.trials += 1;
        if !ok {
            self.outcome.failures += 1;
            self.outcome.example.get_or_insert_with(|| format!("{row:?} | {label}"));
        }
    }
}

/// Property suite against any penalty with the per-row signature.
///
/// Rows are softmax outputs of Gaussian logits with a random spread, so all
/// entries are positive and ties have probability zero. The monotonicity check
/// builds ladders where exactly one class dominates the true class and the
/// true-class mass rises towards it.
pub fn cmp_property_suite_with<F>(cmp: F, rng: &mut RngStream, trials: usize) -> Result<CmpSuiteReport>
where
    F: Fn(&[f64], usize) -> f64,
{
    if trials == 0 {
        return arg("trials must be at least 1");
    }
    let mut bounds = Tally::new(CMP_BOUNDS);
    let mut zero = Tally::new(CMP_ZERO_IFF_CORRECT);
    let mut monotone = Tally::new(CMP_MONOTONE);
    let mut worst_gap = 0.0f64;

    for _ in 0..trials {
        let k = 2 + rng.index(7);
        let spread = 0.1 + 5.0 * rng.uniform();
        let logits: Vec<f64> = (0..k).map(|_| spread * rng.normal()).collect();
        let row = softmax(&logits)?.into_inner();
        let y = rng.index(k);
        let v = cmp(&row, y);
        let in_bounds = (0.0..1.0).contains(&v);
        if !in_bounds {
            worst_gap =
                worst_gap
                    .max(if v < 0.0 { -v } else { v - 1.0 })
                    .max(if v.is_nan() { f64::INFINITY } else { 0.0 });
        }
        bounds.record(in_bounds, &row, y);
        let top1_correct = row.iter().all(|&p| p <= row[y]);
        zero.record((v == 0.0) == top1_correct, &row, y);

        // Ladder: true class 0, dominating class 1, the remaining mass shared
        // evenly by the other classes and kept below the true-class mass.
        let k = 2 + rng.index(7);
        let dominant = 1.0 / k as f64 + (1.0 - 1.0 / k as f64) * (0.1 + 0.8 * rng.uniform());
        let others = k - 2;
        let floor = if others == 0 {
            0.0
        } else {
            (1.0 - dominant) / (others + 1) as f64
        };
        let low = floor.max(1e-3 * dominant);
        let high = dominant.min(1.0 - dominant);
        let steps = 16;
        let mut last = f64::NEG_INFINITY;
        let mut ok = true;
        let mut example = Vec::new();
        for i in 0..steps {
            let p = low + (high - low) * (i as f64 + 0.5) / steps as f64;
            let rest = if others == 0 {
                0.0
            } else {
                (1.0 - dominant - p) / others as f64
            };
            let mut ladder_row = vec![p, dominant];
            ladder_row.extend(std::iter::repeat_n(rest, others));
            // Two classes: renormalize so the row sums to one.
            if others == 0 {
                let s = p + dominant;
                ladder_row.iter_mut().for_each(|v| *v /= s);
            }
            let v = cmp(&ladder_row, 0);
            if !(v > last && v < 1.0) {
                ok = false;
                example = ladder_row;
                break;
            }
            last = v;
        }
        monotone.record(ok, &example, 0);
    }

    Ok(CmpSuiteReport {
        trials,
        properties: vec![bounds.outcome, zero.outcome, monotone.outcome],
        worst_gap,
    })
}

/// One-line machine-readable verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub check: String,
    pub trials: usize,
    pub failures: usize,
    pub worst_gap: f64,
}

impl From<&CmpSuiteReport> for Verdict {
    fn from(r: &CmpSuiteReport) -> Self {
        Self {
            check: "cmp".into(),
            trials: r.trials,
            failures: r.failures(),
            worst_gap: r.worst_gap,
        }
    }
}

/// Per-coordinate tolerance of the analytic gradient against central differences.
pub const GRADIENT_TOLERANCE: f64 = 1e-4;
/// Reference magnitude below which a coordinate is judged on absolute error.
pub const GRADIENT_FLOOR: f64 = 1e-3;
pub const GRADIENT_FD_STEP: f64 = 1e-5;
/// Label of the gradient oracle check.
pub const GRADIENT_ORACLE: &str = "gradient oracle";

/// One random draw of the gradient check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCase {
    pub dims: Dims,
    pub batch_size: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub num_params: usize,
    pub max_relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCheckReport {
    pub cases: Vec<GradientCase>,
    pub failures: usize,
    pub worst_error: f64,
}

impl GradientCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

impl From<&GradientCheckReport> for Verdict {
    fn from(r: &GradientCheckReport) -> Self {
        Self {
            check: GRADIENT_ORACLE.into(),
            trials: r.cases.len(),
            failures: r.failures,
            worst_gap: r.worst_error,
        }
    }
}

/// Random model, batch and `λ ∈ [0, 1]²` with at most `max_params` trainable
/// parameters. Draws where two class probabilities of a sample nearly tie are
/// redrawn: the penalty's support set changes there and no derivative exists.
pub fn random_gradient_problem(
    rng: &mut RngStream,
    max_params: usize,
) -> Result<(ModelParams<f64>, Batch<f64>, f64, f64)> {
    if max_params < 4 {
        return arg("need room for at least four parameters");
    }
    loop {
        let dims = Dims {
            feature_dim: 1 + rng.index(40),
            embed_dim: 1 + rng.index(12),
            num_classes: 2 + rng.index(4),
        };
        if Trainable::all().count(&dims) > max_params {
            continue;
        }
        let n = 2 + rng.index(7);
        let mut p = ModelParams::random(dims, 0.3 + rng.uniform(), rng);
        p.log_tau = -1.5 + 1.5 * rng.uniform();
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dims.feature_dim).map(|_| rng.normal()).collect())
            .collect();
        let labels = (0..n).map(|_| rng.index(dims.num_classes)).collect();
        let batch = Batch::new(Matrix::from_rows(&rows)?, labels)?;
        let (lambda1, lambda2) = (rng.uniform(), rng.uniform());
        let probs = predict_probs(&p, &batch)?;
        let near_tie = (0..probs.len()).any(|i| {
            let row = probs.row(i);
            row.iter()
                .enumerate()
                .any(|(a, &pa)| row[a + 1..].iter().any(|&pb| (pa - pb).abs() < 1e-4))
        });
        if !near_tie {
            return Ok((p, batch, lambda1, lambda2));
        }
    }
}

/// Analytic objective gradient against central differences over `draws`
/// random problems, all parameter groups trainable.
pub fn gradient_check(rng: &mut RngStream, draws: usize, max_params: usize) -> Result<GradientCheckReport> {
    let mask = Trainable::all();
    let mut cases = Vec::with_capacity(draws);
    for _ in 0..draws {
        let (p, batch, lambda1, lambda2) = random_gradient_problem(rng, max_params)?;
        let analytic = calshift_gradient(&p, &batch, lambda1, lambda2)?;
        let f = |t: &[f64]| {
            p.with_flat(&mask, t)
                .and_then(|q| calshift_loss(&q, &batch, lambda1, lambda2))
                .map_or(f64::NAN, |l| l.total)
        };
        let reference = fd_gradient(f, &p.flatten(&mask), GRADIENT_FD_STEP)?;
        cases.push(GradientCase {
            dims: p.dims(),
            batch_size: batch.len(),
            lambda1,
            lambda2,
            num_params: analytic.len(),
            max_relative_error: max_relative_error(&analytic, &reference, GRADIENT_FLOOR),
        });
    }
    let failures = cases
        .iter()
        .filter(|c| !(c.max_relative_error <= GRADIENT_TOLERANCE))
        .count();
    let worst_error = cases.iter().map(|c| c.max_relative_error).fold(0.0, f64::max);
    Ok(GradientCheckReport {
        cases,
        failures,
        worst_error,
    })
}
