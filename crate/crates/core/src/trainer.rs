//! Gradient-descent training under the penalized objective, the damped
//! natural-gradient step, evaluation, and seeded λ sweeps.

use std::io::Write;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{ece, CalibrationReport, DEFAULT_NUM_BINS};
use crate::datagen::{few_shot_split, sample_domain, ShiftScenario, Split};
use crate::error::{arg, Error, Result};
use crate::losses::{empirical_fisher_matrix, CmpVariant, LossBreakdown, Objective};
use crate::model::{predict_probs, Batch, Dims, ModelParams, Trainable};
use crate::numerics::{cholesky_solve, derive_seed, RngStream, Vector};

/// Consecutive learning-rate halvings tolerated before a step is declared divergent.
pub const MAX_HALVINGS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    #[default]
    PlainGradient,
    NaturalGradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// `None` trains full-batch.
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub damping: f64,
    pub trainable: Trainable,
    pub cmp_variant: CmpVariant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.4,
            lambda2: 0.4,
            learning_rate: 0.05,
            epochs: 100,
            batch_size: None,
            seed: 0,
            optimizer: Optimizer::PlainGradient,
            damping: 1e-3,
            trainable: Trainable::all(),
            cmp_variant: CmpVariant::TrueClass,
        }
    }
}

impl TrainConfig {
    pub fn with_lambdas(mut self, lambda1: f64, lambda2: f64) -> Self {
        self.lambda1 = lambda1;
        self.lambda2 = lambda2;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let non_negative = |v: f64| v.is_finite() && v >= 0.0;
        if !non_negative(self.lambda1) || !non_negative(self.lambda2) {
            return arg(format!(
                "penalty weights must be finite and non-negative, got {} and {}",
                self.lambda1, self.lambda2
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return arg(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.epochs == 0 {
            return arg("epochs must be at least 1");
        }
        if self.batch_size == Some(0) {
            return arg("batch size must be at least 1");
        }
        if !(self.damping.is_finite() && self.damping > 0.0) {
            return arg(format!("damping must be positive, got {}", self.damping));
        }
        if self.trainable.is_empty() {
            return arg("no trainable parameter group selected");
        }
        Ok(())
    }

    pub fn objective(&self) -> Objective {
        Objective {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            trainable: self.trainable,
            cmp_variant: self.cmp_variant,
        }
    }
}

/// Accuracy and ECE of one evaluation split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub n: usize,
    pub accuracy: f64,
    pub ece: f64,
}

impl From<&CalibrationReport> for SplitMetrics {
    fn from(r: &CalibrationReport) -> Self {
        Self {
            n: r.n,
            accuracy: r.accuracy,
            ece: r.ece,
        }
    }
}

/// A rejected step: the update was non-finite, so the learning rate was halved.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Halving {
    pub epoch: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub config: TrainConfig,
    /// True when the training batch was empty and no step was taken.
    pub zero_shot: bool,
    /// Objective on the full training batch after each epoch.
    pub epochs: Vec<LossBreakdown<f64>>,
    pub halvings: Vec<Halving>,
    pub source_test: Option<SplitMetrics>,
    pub target_test: Option<SplitMetrics>,
    /// Excluded from the JSON so identical runs serialize identically.
    #[serde(skip)]
    pub wall_time: Duration,
}

impl RunResult {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|l| l.total)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

pub fn evaluate(params: &ModelParams<f64>, batch: &Batch<f64>) -> Result<CalibrationReport> {
    evaluate_with_bins(params, batch, DEFAULT_NUM_BINS)
}

pub fn evaluate_with_bins(params: &ModelParams<f64>, batch: &Batch<f64>, num_bins: usize) -> Result<CalibrationReport> {
    ece(&predict_probs(params, batch)?, num_bins)
}

/// `θ − η·∇L`.
pub fn plain_gradient_step(
    params: &ModelParams<f64>,
    batch: &Batch<f64>,
    cfg: &TrainConfig,
) -> Result<ModelParams<f64>> {
    let grad = cfg.objective().gradient(params, batch)?;
    apply_step(params, &cfg.trainable, &grad, cfg.learning_rate)
}

/// `θ − η·(F + εI)⁻¹∇L` with `F` the empirical Fisher matrix of the trainable
/// coordinates on `batch`.
pub fn natural_gradient_step(
    params: &ModelParams<f64>,
    batch: &Batch<f64>,
    cfg: &TrainConfig,
) -> Result<ModelParams<f64>> {
    let grad = cfg.objective().gradient(params, batch)?;
    let direction = natural_direction(params, batch, cfg, &grad)?;
    apply_step(params, &cfg.trainable, &direction, cfg.learning_rate)
}

fn natural_direction(
    params: &ModelParams<f64>,
    batch: &Batch<f64>,
    cfg: &TrainConfig,
    grad: &[f64],
) -> Result<Vector<f64>> {
    let mut f = empirical_fisher_matrix(params, batch, &cfg.trainable)?;
    for i in 0..f.rows() {
        f[(i, i)] += cfg.damping;
    }
    let training_failure = |reason: String| Error::Training {
        reason,
        epoch: 0,
        last_good: params.checkpoint_vector(),
    };
    let d = cholesky_solve(&f, grad).map_err(|e| training_failure(format!("natural-gradient solve: {e}")))?;
    if !d.is_finite() {
        return Err(training_failure(
            "natural-gradient solve produced non-finite values".into(),
        ));
    }
    Ok(d)
}

fn apply_step(params: &ModelParams<f64>, mask: &Trainable, direction: &[f64], lr: f64) -> Result<ModelParams<f64>> {
    let mut theta = params.flatten(mask);
    theta.axpy(-lr, direction);
    params.with_flat(mask, &theta)
}

fn step_direction(params: &ModelParams<f64>, batch: &Batch<f64>, cfg: &TrainConfig) -> Result<Vector<f64>> {
    let grad = cfg.objective().gradient(params, batch)?;
    match cfg.optimizer {
        Optimizer::PlainGradient => Ok(grad),
        Optimizer::NaturalGradient => natural_direction(params, batch, cfg, &grad),
    }
}

/// Minimize the objective on `train_batch`.
///
/// Full-batch by default; with `batch_size` set, each epoch visits a fresh
/// seeded permutation in contiguous chunks. A step whose result is non-finite
/// is rejected and retried at half the learning rate, which then stays in
/// effect for the rest of the run.
pub fn train(
    params: ModelParams<f64>,
    train_batch: &Batch<f64>,
    cfg: &TrainConfig,
) -> Result<(ModelParams<f64>, RunResult)> {
    let started = Instant::now();
    cfg.validate()?;
    params.validate()?;
    let mut result = RunResult {
        config: cfg.clone(),
        zero_shot: train_batch.is_empty(),
        epochs: Vec::new(),
        halvings: Vec::new(),
        source_test: None,
        target_test: None,
        wall_time: Duration::ZERO,
    };
    if train_batch.is_empty() {
        result.wall_time = started.elapsed();
        return Ok((params, result));
    }
    let dims = params.dims();
    train_batch.check_against(dims.num_classes, dims.feature_dim)?;

    let objective = cfg.objective();
    let mut rng = RngStream::new(cfg.seed).derive("minibatch");
    let mut lr = cfg.learning_rate;
    let mut current = params;
    let mut order: Vec<usize> = (0..train_batch.len()).collect();
    for epoch in 0..cfg.epochs {
        let chunks: Vec<Batch<f64>> = match cfg.batch_size {
            Some(size) if size < train_batch.len() => {
                rng.shuffle(&mut order);
                order.chunks(size).map(|c| train_batch.select(c)).collect()
            }
            _ => vec![train_batch.clone()],
        };
        for chunk in &chunks {
            let direction = step_direction(&current, chunk, cfg).map_err(|e| with_epoch(e, epoch, &current))?;
            let mut halvings = 0;
            loop {
                let candidate = apply_step(&current, &cfg.trainable, &direction, lr)?;
                let finite = candidate.is_finite()
                    && objective
                        .loss(&candidate, chunk)
                        .map(|l| l.is_finite())
                        .unwrap_or(false);
                if finite {
                    current = candidate;
                    break;
                }
                if halvings == MAX_HALVINGS {
                    return Err(Error::Training {
                        reason: format!("update still non-finite after {MAX_HALVINGS} learning-rate halvings"),
                        epoch,
                        last_good: current.checkpoint_vector(),
                    });
                }
                halvings += 1;
                lr *= 0.5;
                result.halvings.push(Halving {
                    epoch,
                    learning_rate: lr,
                });
            }
        }
        let loss = objective
            .loss(&current, train_batch)
            .map_err(|e| with_epoch(e, epoch, &current))?;
        result.epochs.push(loss);
    }
    result.wall_time = started.elapsed();
    Ok((current, result))
}

fn with_epoch(e: Error, epoch: usize, params: &ModelParams<f64>) -> Error {
    match e {
        Error::Training { reason, .. } => Error::Training {
            reason,
            epoch,
            last_good: params.checkpoint_vector(),
        },
        other => other,
    }
}

/// How the initial model stands in for a pretrained dual encoder: a random
/// image projection, class tokens taken as the projected source class means
/// plus noise, zero context.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    pub embed_dim: usize,
    pub weight_scale: f64,
    pub prototype_noise: f64,
    pub log_tau: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            embed_dim: 8,
            weight_scale: 0.5,
            prototype_noise: 0.5,
            log_tau: 0.07f64.ln(),
        }
    }
}

pub fn init_params(scenario: &ShiftScenario, init: &InitConfig, rng: &mut RngStream) -> Result<ModelParams<f64>> {
    let dims = Dims {
        feature_dim: scenario.feature_dim,
        embed_dim: init.embed_dim,
        num_classes: scenario.num_classes,
    };
    dims.validate()?;
    let mut p = ModelParams::<f64>::zeros(dims);
    for v in p.w_img.as_mut_slice() {
        *v = init.weight_scale * rng.normal();
    }
    for (k, mean) in scenario.component_means.iter().enumerate() {
        let projected = p.w_img.matvec(mean)?;
        for (dst, &v) in p.class_base.row_mut(k).iter_mut().zip(projected.iter()) {
            *dst = v + init.prototype_noise * rng.normal();
        }
    }
    p.log_tau = init.log_tau;
    Ok(p)
}

/// Everything needed to turn one seed into training and evaluation data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Protocol {
    pub scenario: ShiftScenario,
    pub shots: usize,
    /// Labeled source samples from which the few-shot set is drawn.
    pub pool_size: usize,
    pub test_size: usize,
    #[serde(default)]
    pub init: InitConfig,
}

#[derive(Debug, Clone)]
pub struct Replicate {
    pub seed: u64,
    pub init: ModelParams<f64>,
    pub train: Batch<f64>,
    pub source_test: Batch<f64>,
    pub target_test: Batch<f64>,
    /// ECE bin count used when evaluating the test splits.
    pub num_bins: usize,
}

impl Protocol {
    pub fn split_size(&self, split: Split) -> usize {
        match split {
            Split::SourceTrain => self.pool_size,
            Split::SourceTest | Split::TargetTest => self.test_size,
        }
    }

    /// One data split of replicate `seed`, drawn from its own child stream.
    pub fn sample_split(&self, seed: u64, split: Split) -> Result<Batch<f64>> {
        let mut rng = RngStream::new(seed).derive(split.name());
        sample_domain(&self.scenario, split.domain(), self.split_size(split), &mut rng)
    }

    /// Replicate from already drawn splits: the few-shot subset of `pool` and
    /// the initial model each come from further child streams of `seed`, so
    /// e.g. changing `shots` leaves the test sets untouched.
    pub fn assemble(
        &self,
        seed: u64,
        pool: &Batch<f64>,
        source_test: Batch<f64>,
        target_test: Batch<f64>,
    ) -> Result<Replicate> {
        let root = RngStream::new(seed);
        Ok(Replicate {
            seed,
            init: init_params(&self.scenario, &self.init, &mut root.derive("init"))?,
            train: few_shot_split(
                pool,
                self.shots,
                self.scenario.num_classes,
                &mut root.derive("few-shot"),
            )?,
            source_test,
            target_test,
            num_bins: DEFAULT_NUM_BINS,
        })
    }

    pub fn replicate(&self, seed: u64) -> Result<Replicate> {
        let pool = self.sample_split(seed, Split::SourceTrain)?;
        self.assemble(
            seed,
            &pool,
            self.sample_split(seed, Split::SourceTest)?,
            self.sample_split(seed, Split::TargetTest)?,
        )
    }
}

/// Train on the replicate's few-shot set and evaluate on both test splits.
pub fn run_replicate(rep: &Replicate, cfg: &TrainConfig) -> Result<(ModelParams<f64>, RunResult)> {
    let started = Instant::now();
    let mut cfg = cfg.clone();
    cfg.seed = rep.seed;
    let (params, mut result) = train(rep.init.clone(), &rep.train, &cfg)?;
    result.source_test = Some(SplitMetrics::from(&evaluate_with_bins(
        &params,
        &rep.source_test,
        rep.num_bins,
    )?));
    result.target_test = Some(SplitMetrics::from(&evaluate_with_bins(
        &params,
        &rep.target_test,
        rep.num_bins,
    )?));
    result.wall_time = started.elapsed();
    Ok((params, result))
}

/// Seed of replicate `repeat` under base seed `seed`. It depends on nothing
/// else, so every λ cell of a replicate sees the same data and initial model.
pub fn replicate_seed(seed: u64, repeat: usize) -> u64 {
    derive_seed(seed, &format!("replicate-{repeat}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub lambda1: f64,
    pub lambda2: f64,
    pub repeat: usize,
    pub seed: u64,
    pub outcome: std::result::Result<RunResult, String>,
}

/// Runs every `(λ₁, λ₂, repeat)` in λ₁-major cartesian order on a pool of
/// `workers` threads. A failing cell records its error instead of aborting.
pub fn lambda_sweep(
    protocol: &Protocol,
    grid1: &[f64],
    grid2: &[f64],
    template: &TrainConfig,
    repeats: usize,
    workers: usize,
) -> Result<Vec<SweepCell>> {
    if repeats == 0 {
        return arg("repeats must be at least 1");
    }
    let replicates: Vec<std::result::Result<Replicate, String>> = (0..repeats)
        .map(|r| {
            protocol
                .replicate(replicate_seed(template.seed, r))
                .map_err(|e| e.to_string())
        })
        .collect();
    sweep_replicates(&replicates, grid1, grid2, template, workers)
}

/// [`lambda_sweep`] over replicates that are already built; entry `r` is
/// repeat `r`, and a replicate that failed to build fails all its cells.
pub fn sweep_replicates(
    replicates: &[std::result::Result<Replicate, String>],
    grid1: &[f64],
    grid2: &[f64],
    template: &TrainConfig,
    workers: usize,
) -> Result<Vec<SweepCell>> {
    if grid1.is_empty() || grid2.is_empty() {
        return arg("λ grids must be non-empty");
    }
    if replicates.is_empty() {
        return arg("repeats must be at least 1");
    }
    template.validate()?;
    let repeats = replicates.len();
    let keys: Vec<(f64, f64, usize)> = grid1
        .iter()
        .flat_map(|&l1| grid2.iter().flat_map(move |&l2| (0..repeats).map(move |r| (l1, l2, r))))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Argument(format!("thread pool: {e}")))?;
    Ok(pool.install(|| {
        keys.par_iter()
            .map(|&(lambda1, lambda2, repeat)| {
                let outcome = replicates[repeat].as_ref().map_err(Clone::clone).and_then(|rep| {
                    run_replicate(rep, &template.clone().with_lambdas(lambda1, lambda2))
                        .map(|(_, result)| result)
                        .map_err(|e| e.to_string())
                });
                SweepCell {
                    lambda1,
                    lambda2,
                    repeat,
                    seed: replicates[repeat]
                        .as_ref()
                        .map_or_else(|_| replicate_seed(template.seed, repeat), |rep| rep.seed),
                    outcome,
                }
            })
            .collect()
    }))
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self {
            mean,
            std,
            n: values.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub lambda1: f64,
    pub lambda2: f64,
    pub failures: usize,
    pub target_accuracy: Option<MeanStd>,
    pub target_ece: Option<MeanStd>,
    pub source_accuracy: Option<MeanStd>,
    pub source_ece: Option<MeanStd>,
}

/// Per-`(λ₁, λ₂)` aggregates in first-appearance order.
pub fn summarize(cells: &[SweepCell]) -> Vec<CellSummary> {
    let mut keys: Vec<(f64, f64)> = Vec::new();
    for c in cells {
        if !keys
            .iter()
            .any(|&(a, b)| a.to_bits() == c.lambda1.to_bits() && b.to_bits() == c.lambda2.to_bits())
        {
            keys.push((c.lambda1, c.lambda2));
        }
    }
    keys.into_iter()
        .map(|(lambda1, lambda2)| {
            let group: Vec<&SweepCell> = cells
                .iter()
                .filter(|c| c.lambda1.to_bits() == lambda1.to_bits() && c.lambda2.to_bits() == lambda2.to_bits())
                .collect();
            let ok: Vec<&RunResult> = group.iter().filter_map(|c| c.outcome.as_ref().ok()).collect();
            let stat = |f: &dyn Fn(&RunResult) -> Option<f64>| {
                MeanStd::of(&ok.iter().filter_map(|r| f(r)).collect::<Vec<_>>())
            };
            CellSummary {
                lambda1,
                lambda2,
                failures: group.len() - ok.len(),
                target_accuracy: stat(&|r| r.target_test.map(|m| m.accuracy)),
                target_ece: stat(&|r| r.target_test.map(|m| m.ece)),
                source_accuracy: stat(&|r| r.source_test.map(|m| m.accuracy)),
                source_ece: stat(&|r| r.source_test.map(|m| m.ece)),
            }
        })
        .collect()
}

/// Sweep CSV with columns `lambda1,lambda2,seed,split,accuracy,ece_percent,final_loss`:
/// one row per successful run, reporting the given evaluation split.
pub fn write_sweep_csv<W: Write>(cells: &[SweepCell], split: Split, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "lambda1",
        "lambda2",
        "seed",
        "split",
        "accuracy",
        "ece_percent",
        "final_loss",
    ])?;
    for cell in cells {
        let Ok(result) = &cell.outcome else { continue };
        let final_loss = result.final_loss().map(|v| v.to_string()).unwrap_or_default();
        let metrics = match split {
            Split::SourceTest => result.source_test,
            Split::TargetTest => result.target_test,
            Split::SourceTrain => return arg("the sweep reports a test split"),
        };
        {
            if let Some(m) = metrics {
                w.write_record([
                    cell.lambda1.to_string(),
                    cell.lambda2.to_string(),
                    cell.seed.to_string(),
                    split.name().to_string(),
                    m.accuracy.to_string(),
                    (m.ece * 100.0).to_string(),
                    final_loss.clone(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
