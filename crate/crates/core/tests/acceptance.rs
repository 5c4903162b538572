//! Acceptance criteria. Each test prints one `criterion N ...: PASS|FAIL` line
//! straight to stdout so the verdicts survive output capture.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use calshift::calibration::{brute_force_ece, ece};
use calshift::cli::{run_cli, ExperimentConfig, EXIT_OK};
use calshift::datagen::{mean_equality_z_test, probe_grid, sample_domain, Domain};
use calshift::losses::{cmp_row, empirical_fisher, Bernoulli};
use calshift::numerics::{softmax, RngStream};
use calshift::propcheck::{
    cmp_property_suite, delta_ladder, fisher_kl_check, gradient_check, Family, GRADIENT_TOLERANCE,
};
use calshift::trainer::{replicate_seed, run_replicate, Replicate};
use calshift::ProbBatch;
use statrs::distribution::{Binomial, DiscreteCDF};

fn report(n: usize, name: &str, pass: bool, started: Instant, limit: Duration, detail: String) {
    let elapsed = started.elapsed();
    let within = elapsed <= limit;
    let verdict = if pass && within { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(
        out,
        "criterion {n} {name}: {verdict} ({detail}; {:.1} s of {} s)",
        elapsed.as_secs_f64(),
        limit.as_secs()
    );
    let _ = out.flush();
    assert!(pass, "criterion {n} failed: {detail}");
    assert!(within, "criterion {n} exceeded its runtime limit");
}

#[test]
fn criterion_1_gradient_oracle() {
    let started = Instant::now();
    let r = gradient_check(&mut RngStream::new(101), 100, 500).unwrap();
    let largest = r.cases.iter().map(|c| c.num_params).max().unwrap();
    report(
        1,
        "gradient oracle",
        r.passed() && r.cases.len() == 100 && largest <= 500,
        started,
        Duration::from_secs(60),
        format!(
            "100 draws up to {largest} params, worst relative error {:.2e} vs {GRADIENT_TOLERANCE:e}",
            r.worst_error
        ),
    );
}

#[test]
fn criterion_2_cmp_contract() {
    let started = Instant::now();
    let suite = cmp_property_suite(&mut RngStream::new(102), 100_000).unwrap();
    let bounds_and_zero = suite.properties[..2]
        .iter()
        .all(|p| p.failures == 0 && p.trials == 100_000);
    let hand = [
        (cmp_row(&[0.2f64, 0.5, 0.3], 0).unwrap(), 0.25),
        (cmp_row(&[0.4f64, 0.6], 0).unwrap(), 0.4 / 0.6),
    ];
    let hand_ok = hand.iter().all(|(got, want)| (got - want).abs() <= 1e-12);
    report(
        2,
        "CMP contract",
        bounds_and_zero && hand_ok,
        started,
        Duration::from_secs(5),
        format!(
            "100000 rows, {} failures; hand cases {:.15} and {:.15}",
            suite.failures(),
            hand[0].0,
            hand[1].0
        ),
    );
}

#[test]
fn criterion_3_fisher_estimator() {
    let started = Instant::now();
    let mut rng = RngStream::new(103);
    let samples: Vec<bool> = (0..1_000_000).map(|_| rng.uniform() < 0.5).collect();
    let heads = samples.iter().filter(|&&s| s).count();
    let fisher: f64 = empirical_fisher(&Bernoulli::new(0.5).unwrap(), &samples).unwrap();
    report(
        3,
        "Fisher estimator",
        (fisher - 4.0).abs() <= 0.1,
        started,
        Duration::from_secs(30),
        format!("n = 10^6 ({heads} successes), estimate {fisher:.6}, analytic 4"),
    );
}

#[test]
fn criterion_4_fisher_kl_quadratic() {
    let started = Instant::now();
    let mut worst_gaussian = 0.0f64;
    for (theta, sigma) in [(0.0, 1.0), (1.5, 0.3), (-2.0, 4.0)] {
        for r in fisher_kl_check(Family::GaussianMean { sigma }, theta, &delta_ladder(1.0, 12)).unwrap() {
            worst_gaussian = worst_gaussian.max(r.relative_gap);
        }
    }
    let deltas = [0.1, 0.05, 0.025, 0.0125];
    let mut ladders = Vec::new();
    for theta in [0.5, 0.3, 0.8] {
        let gaps: Vec<f64> = fisher_kl_check(Family::Bernoulli, theta, &deltas)
            .unwrap()
            .iter()
            .map(|r| r.relative_gap)
            .collect();
        ladders.push((theta, gaps));
    }
    let monotone = ladders.iter().all(|(_, g)| g.windows(2).all(|w| w[1] < w[0]));
    report(
        4,
        "Fisher-KL quadratic relation",
        worst_gaussian <= 1e-12 && monotone,
        started,
        Duration::from_secs(5),
        format!(
            "Gaussian worst gap {worst_gaussian:.1e}; Bernoulli gaps at θ = 0.5: {:.2e} > {:.2e} > {:.2e} > {:.2e}",
            ladders[0].1[0], ladders[0].1[1], ladders[0].1[2], ladders[0].1[3]
        ),
    );
}

fn random_prob_batch(rng: &mut RngStream) -> ProbBatch<f64> {
    let n = 1 + rng.index(300);
    let k = 2 + rng.index(9);
    let spread = 0.2 + 6.0 * rng.uniform();
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        // Some rows sit exactly on bin edges to exercise right-closed bins.
        if rng.uniform() < 0.1 {
            let c = [0.5, 0.6, 0.7, 0.8, 0.9, 1.0][rng.index(6)];
            let mut row = vec![(1.0 - c) / (k - 1) as f64; k];
            row[rng.index(k)] = c;
            rows.push(row);
        } else {
            let logits: Vec<f64> = (0..k).map(|_| spread * rng.normal()).collect();
            rows.push(softmax(&logits).unwrap().into_inner());
        }
    }
    let labels = (0..n).map(|_| rng.index(k)).collect();
    ProbBatch::from_rows(&rows, labels).unwrap()
}

#[test]
fn criterion_5_ece_oracle() {
    let started = Instant::now();
    let mut rng = RngStream::new(105);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let pb = random_prob_batch(&mut rng);
        let bins = [1, 10, 15, 100][i % 4];
        let fast = ece(&pb, bins).unwrap().ece;
        worst = worst.max((fast - brute_force_ece(&pb, bins).unwrap()).abs());
    }
    let hand = ProbBatch::from_rows(
        &[vec![0.65, 0.35], vec![0.65, 0.35], vec![0.95, 0.05], vec![0.05, 0.95]],
        vec![0, 1, 0, 1],
    )
    .unwrap();
    let hand_ece = ece(&hand, 10).unwrap().ece;
    // 0.65 and 0.95 are not representable, so "exact" means to the last few ulps.
    let hand_ok = (hand_ece - 0.10).abs() <= 4.0 * f64::EPSILON;
    report(
        5,
        "ECE oracle equivalence",
        worst <= 1e-12 && hand_ok,
        started,
        Duration::from_secs(30),
        format!("1000 batches, worst difference {worst:.1e}; hand case {hand_ece:.17}"),
    );
}

/// Mean of `metric` on the target test split over the fixture's shot counts.
struct FixtureRuns {
    cfg: ExperimentConfig,
}

impl FixtureRuns {
    fn replicates(&self, seed: u64) -> Vec<Replicate> {
        self.cfg
            .shots
            .iter()
            .map(|&s| self.cfg.protocol(s).unwrap().replicate(seed).unwrap())
            .collect()
    }

    /// `(target accuracy, target ECE)` averaged over shots.
    fn target_metrics(&self, reps: &[Replicate], lambda1: f64, lambda2: f64) -> (f64, f64) {
        let cfg = self.cfg.train.clone().with_lambdas(lambda1, lambda2);
        let mut acc = 0.0;
        let mut ece = 0.0;
        for rep in reps {
            let m = run_replicate(rep, &cfg).unwrap().1.target_test.unwrap();
            acc += m.accuracy;
            ece += m.ece;
        }
        (acc / reps.len() as f64, ece / reps.len() as f64)
    }
}

/// One-sided sign test: `P(X ≥ wins)` for `X ~ Bin(wins + losses, ½)`.
fn sign_test(wins: u64, losses: u64) -> f64 {
    let n = wins + losses;
    if wins == 0 {
        return 1.0;
    }
    Binomial::new(0.5, n).unwrap().sf(wins - 1)
}

const DIRECTIONAL_SEED: u64 = 4242;
const DIRECTIONAL_SEEDS: usize = 200;

#[test]
fn criterion_6_directional_reproduction() {
    let started = Instant::now();
    let runs = FixtureRuns {
        cfg: ExperimentConfig::fixture(),
    };
    let shift_units = runs.cfg.scenario.shift_magnitude / runs.cfg.scenario.separation;
    let (mut base_acc, mut fim_acc, mut base_ece, mut cmp_ece) = (0.0, 0.0, 0.0, 0.0);
    let (mut acc_wins, mut acc_losses, mut ece_wins, mut ece_losses) = (0, 0, 0, 0);
    for i in 0..DIRECTIONAL_SEEDS {
        let reps = runs.replicates(replicate_seed(DIRECTIONAL_SEED, i));
        let base = runs.target_metrics(&reps, 0.0, 0.0);
        let fim = runs.target_metrics(&reps, 0.4, 0.0);
        let cmp = runs.target_metrics(&reps, 0.0, 0.4);
        base_acc += base.0;
        fim_acc += fim.0;
        base_ece += base.1;
        cmp_ece += cmp.1;
        match fim.0.partial_cmp(&base.0).unwrap() {
            std::cmp::Ordering::Greater => acc_wins += 1,
            std::cmp::Ordering::Less => acc_losses += 1,
            std::cmp::Ordering::Equal => {}
        }
        match cmp.1.partial_cmp(&base.1).unwrap() {
            std::cmp::Ordering::Less => ece_wins += 1,
            std::cmp::Ordering::Greater => ece_losses += 1,
            std::cmp::Ordering::Equal => {}
        }
    }
    let n = DIRECTIONAL_SEEDS as f64;
    let (base_acc, fim_acc, base_ece, cmp_ece) = (base_acc / n, fim_acc / n, base_ece / n, cmp_ece / n);
    let p_acc = sign_test(acc_wins, acc_losses);
    let p_ece = sign_test(ece_wins, ece_losses);
    let pass =
        (shift_units - 1.0).abs() < 1e-12 && fim_acc > base_acc && p_acc < 0.05 && cmp_ece < base_ece && p_ece < 0.05;
    report(
        6,
        "directional reproduction",
        pass,
        started,
        Duration::from_secs(15 * 60),
        format!(
            "{DIRECTIONAL_SEEDS} seeds x shots {:?}, shift {shift_units} separation units; \
             (a) target ACC {:.2}% -> {:.2}% with FIM, wins {acc_wins}/{}, p = {p_acc:.2e}; \
             (b) target ECE {:.2}% -> {:.2}% with CMP, wins {ece_wins}/{}, p = {p_ece:.2e}",
            runs.cfg.shots,
            100.0 * base_acc,
            100.0 * fim_acc,
            acc_wins + acc_losses,
            100.0 * base_ece,
            100.0 * cmp_ece,
            ece_wins + ece_losses,
        ),
    );
}

const SWEEP_SEED: u64 = 8080;
const REPLICATIONS: usize = 10;
const SEEDS_PER_REPLICATION: usize = 8;

#[test]
fn criterion_7_interior_optimum() {
    let started = Instant::now();
    let runs = FixtureRuns {
        cfg: ExperimentConfig::fixture(),
    };
    let grid = runs.cfg.sweep.grid1.clone();
    assert_eq!(grid, [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]);
    let mut interior_fim = 0;
    let mut interior_cmp = 0;
    let mut best_fim = Vec::new();
    let mut best_cmp = Vec::new();
    for r in 0..REPLICATIONS {
        let mut acc = vec![0.0; grid.len()];
        let mut ece = vec![0.0; grid.len()];
        for j in 0..SEEDS_PER_REPLICATION {
            let reps = runs.replicates(replicate_seed(SWEEP_SEED, r * SEEDS_PER_REPLICATION + j));
            for (g, &lambda) in grid.iter().enumerate() {
                let fim = runs.target_metrics(&reps, lambda, 0.0);
                acc[g] += fim.0;
                ece[g] += if lambda == 0.0 {
                    fim.1
                } else {
                    runs.target_metrics(&reps, 0.0, lambda).1
                };
            }
        }
        let argbest = |v: &[f64], higher: bool| {
            (0..v.len())
                .reduce(|b, i| {
                    if (higher && v[i] > v[b]) || (!higher && v[i] < v[b]) {
                        i
                    } else {
                        b
                    }
                })
                .unwrap()
        };
        let (a, e) = (argbest(&acc, true), argbest(&ece, false));
        interior_fim += usize::from(a != 0 && a != grid.len() - 1);
        interior_cmp += usize::from(e != 0 && e != grid.len() - 1);
        best_fim.push(grid[a]);
        best_cmp.push(grid[e]);
    }
    report(
        7,
        "λ-sweep interior optimum",
        interior_fim >= 7 && interior_cmp >= 7,
        started,
        Duration::from_secs(20 * 60),
        format!(
            "{REPLICATIONS} replications of {SEEDS_PER_REPLICATION} seeds x shots {:?}; \
             λ1 (target ACC) interior {interior_fim}/10, best {best_fim:?}; \
             λ2 (target ECE) interior {interior_cmp}/10, best {best_cmp:?}",
            runs.cfg.shots
        ),
    );
}

#[test]
fn criterion_8_covariate_shift_validity() {
    let started = Instant::now();
    let shifted = ExperimentConfig::fixture().scenario.build().unwrap();
    let d = shifted.feature_dim;
    let null = shifted.clone().with_shift(vec![0.0; d], 1.0).unwrap();
    let grid = probe_grid(&shifted, 10_000, &mut RngStream::new(108));
    let (source_rule, target_rule) = (null.labeling_rule(), shifted.labeling_rule());
    // Independent oracle: nearest source class mean, lowest index on ties.
    let oracle = |x: &[f64]| {
        let dist = |m: &Vec<f64>| m.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        (0..shifted.num_classes)
            .reduce(|b, k| {
                if dist(&shifted.component_means[k]) < dist(&shifted.component_means[b]) {
                    k
                } else {
                    b
                }
            })
            .unwrap()
    };
    let mismatches = grid
        .iter()
        .filter(|x| source_rule.label(x) != target_rule.label(x) || target_rule.label(x) != oracle(x))
        .count();

    let src = sample_domain(&null, Domain::Source, 10_000, &mut RngStream::new(1081)).unwrap();
    let tgt = sample_domain(&null, Domain::Target, 10_000, &mut RngStream::new(1082)).unwrap();
    let null_test = mean_equality_z_test(&src, &tgt).unwrap();
    let shifted_tgt = sample_domain(&shifted, Domain::Target, 10_000, &mut RngStream::new(1082)).unwrap();
    let shifted_test = mean_equality_z_test(&src, &shifted_tgt).unwrap();
    report(
        8,
        "covariate-shift validity",
        grid.len() == 10_000 && mismatches == 0 && null_test.passes(0.001) && !shifted_test.passes(0.001),
        started,
        Duration::from_secs(60),
        format!(
            "{} probe points, {mismatches} mismatches; null shift p = {:.3}, fixture shift p = {:.1e}",
            grid.len(),
            null_test.p_value,
            shifted_test.p_value
        ),
    );
}

fn run_outputs(config: &Path, out: &Path) -> (String, Vec<(String, Vec<u8>)>) {
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let mut sink = Vec::new();
    let mut stdout = Vec::new();
    let mut stderr = Vec::new();
    assert_eq!(
        run_cli(
            ["calshift", "generate", "--config", &s(config), "--out", &s(out)],
            &mut sink,
            &mut stderr
        ),
        EXIT_OK
    );
    assert_eq!(
        run_cli(
            ["calshift", "run", "--config", &s(config), "--out", &s(out)],
            &mut stdout,
            &mut stderr
        ),
        EXIT_OK
    );
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(out.join("runs"))
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    for name in ["summary.md", "summary.json"] {
        files.push((name.to_string(), fs::read(out.join(name)).unwrap()));
    }
    files.sort();
    (String::from_utf8(stdout).unwrap(), files)
}

#[test]
fn criterion_9_determinism() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("fixture.toml");
    fs::write(&config, ExperimentConfig::fixture().to_toml()).unwrap();
    let (table_a, files_a) = run_outputs(&config, &dir.path().join("a"));
    let (table_b, files_b) = run_outputs(&config, &dir.path().join("b"));
    report(
        9,
        "determinism",
        table_a == table_b && files_a == files_b && !table_a.is_empty(),
        started,
        Duration::from_secs(120),
        format!("two runs, {} files and the stdout tables byte-identical", files_a.len()),
    );
}
