use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::report::{format_value, markdown_table, results_table, Metric};
use super::{EXIT_OK, EXIT_PROPERTY};
use crate::datagen::{file_sha256, load_dataset, save_dataset, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::losses::cmp_sample;
use crate::model::{save_checkpoint, ModelParams};
use crate::numerics::RngStream;
use crate::propcheck::{
    cmp_property_suite_with, delta_ladder, fisher_kl_check, gaps_shrink, gradient_check, Family, Verdict, CMP_BOUNDS,
};
use crate::trainer::{
    replicate_seed, run_replicate, summarize, sweep_replicates, write_sweep_csv, CellSummary, MeanStd, Replicate,
    RunResult, SweepCell,
};

/// Where and how a command runs; neither field affects results.
#[derive(Debug, Clone, PartialEq)]
pub struct Runtime {
    pub out: PathBuf,
    pub workers: usize,
}

fn data_dir(out: &Path, repeat: usize) -> PathBuf {
    out.join("data").join(format!("rep{repeat}"))
}

fn manifest_path(out: &Path, repeat: usize, split: Split) -> PathBuf {
    data_dir(out, repeat).join(format!("{}.manifest.json", split.name()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// Outcome of [`generate`]: files rewritten and files found up to date.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GenerateSummary {
    pub written: usize,
    pub up_to_date: usize,
}

/// A manifest is current when it describes this scenario, seed and size and
/// the file on disk still has the recorded checksum.
fn is_current(manifest_file: &Path, scenario_hash: &str, seed: u64, n: usize) -> bool {
    let Ok(m) = DatasetManifest::read(manifest_file) else {
        return false;
    };
    let dir = manifest_file.parent().unwrap_or(Path::new("."));
    m.scenario_hash == scenario_hash
        && m.seed == seed
        && m.n == n
        && file_sha256(&dir.join(&m.path)).is_ok_and(|sha| sha == m.sha256)
}

/// Write every replicate's source pool, source test set and target test set.
/// Files whose manifest already matches are left untouched.
pub fn generate(cfg: &ExperimentConfig, rt: &Runtime, stdout: &mut dyn Write) -> Result<GenerateSummary> {
    let protocol = cfg.protocol(cfg.sweep.shots)?;
    let hash = protocol.scenario.hash();
    let mut summary = GenerateSummary::default();
    for repeat in 0..cfg.repeats {
        let seed = replicate_seed(cfg.seed, repeat);
        let dir = data_dir(&rt.out, repeat);
        fs::create_dir_all(&dir)?;
        for split in Split::ALL {
            let manifest_file = manifest_path(&rt.out, repeat, split);
            if is_current(&manifest_file, &hash, seed, protocol.split_size(split)) {
                summary.up_to_date += 1;
                continue;
            }
            let file_name = format!("{}.csv", split.name());
            let mut manifest = DatasetManifest::new(&protocol.scenario, seed, split, dir.join(&file_name));
            save_dataset(&protocol.sample_split(seed, split)?, &mut manifest)?;
            manifest.path = PathBuf::from(file_name);
            manifest.write(&manifest_file)?;
            summary.written += 1;
        }
    }
    if summary.written == 0 {
        writeln!(stdout, "up to date ({} datasets)", summary.up_to_date)?;
    } else {
        writeln!(
            stdout,
            "wrote {} datasets, {} up to date",
            summary.written, summary.up_to_date
        )?;
    }
    Ok(summary)
}

fn load_split(cfg: &ExperimentConfig, out: &Path, repeat: usize, split: Split) -> Result<crate::model::Batch<f64>> {
    let path = manifest_path(out, repeat, split);
    let mut manifest = DatasetManifest::read(&path).map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(
            io.kind(),
            format!("{}: {io}; run `calshift generate` first", path.display()),
        )),
        other => other,
    })?;
    let scenario = cfg.scenario.build()?;
    let seed = replicate_seed(cfg.seed, repeat);
    if manifest.scenario_hash != scenario.hash() || manifest.seed != seed {
        return Err(Error::Schema(format!(
            "{}: dataset does not match the config; rerun `calshift generate`",
            path.display()
        )));
    }
    manifest.path = path.parent().unwrap_or(Path::new(".")).join(&manifest.path);
    load_dataset(&manifest)
}

/// Replicates at `shots` from the generated datasets.
pub fn load_replicates(cfg: &ExperimentConfig, out: &Path, shots: usize) -> Result<Vec<Replicate>> {
    let protocol = cfg.protocol(shots)?;
    (0..cfg.repeats)
        .map(|repeat| {
            let pool = load_split(cfg, out, repeat, Split::SourceTrain)?;
            let source_test = load_split(cfg, out, repeat, Split::SourceTest)?;
            let target_test = load_split(cfg, out, repeat, Split::TargetTest)?;
            let mut rep = protocol.assemble(replicate_seed(cfg.seed, repeat), &pool, source_test, target_test)?;
            rep.num_bins = cfg.bins;
            Ok(rep)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Baseline,
    Fim,
    Cmp,
    FimCmp,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::Fim, Variant::Cmp, Variant::FimCmp];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Fim => "fim",
            Variant::Cmp => "cmp",
            Variant::FimCmp => "fim-cmp",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "Base",
            Variant::Fim => "Base + FIM",
            Variant::Cmp => "Base + CMP",
            Variant::FimCmp => "Base + FIM + CMP",
        }
    }

    pub fn lambdas(self, lambda1: f64, lambda2: f64) -> (f64, f64) {
        match self {
            Variant::Baseline => (0.0, 0.0),
            Variant::Fim => (lambda1, 0.0),
            Variant::Cmp => (0.0, lambda2),
            Variant::FimCmp => (lambda1, lambda2),
        }
    }
}

/// Everything needed to recompute a table cell from disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub experiment: ExperimentConfig,
    pub variant: Variant,
    pub shots: usize,
    pub repeat: usize,
    pub seed: u64,
    pub result: RunResult,
}

impl RunRecord {
    pub fn file_name(variant: Variant, shots: usize, repeat: usize) -> String {
        format!("{}-{shots}shot-rep{repeat}.json", variant.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub variant: Variant,
    pub shots: usize,
    pub repeat: usize,
    pub error: String,
}

/// Mean over replicates of one `(variant, shots)` cell; metrics are fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: Variant,
    pub shots: usize,
    pub source_accuracy: Option<MeanStd>,
    pub source_ece: Option<MeanStd>,
    pub target_accuracy: Option<MeanStd>,
    pub target_ece: Option<MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub rows: Vec<SummaryRow>,
    pub failures: Vec<RunFailure>,
}

/// Aggregate run records into per-`(variant, shots)` rows.
pub fn summarize_records(records: &[RunRecord], shots: &[usize]) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    for variant in Variant::ALL {
        for &s in shots {
            let group: Vec<&RunResult> = records
                .iter()
                .filter(|r| r.variant == variant && r.shots == s)
                .map(|r| &r.result)
                .collect();
            let stat = |f: &dyn Fn(&RunResult) -> Option<f64>| {
                MeanStd::of(&group.iter().filter_map(|r| f(r)).collect::<Vec<_>>())
            };
            rows.push(SummaryRow {
                variant,
                shots: s,
                source_accuracy: stat(&|r| r.source_test.map(|m| m.accuracy)),
                source_ece: stat(&|r| r.source_test.map(|m| m.ece)),
                target_accuracy: stat(&|r| r.target_test.map(|m| m.accuracy)),
                target_ece: stat(&|r| r.target_test.map(|m| m.ece)),
            });
        }
    }
    rows
}

/// The four result tables (source and target, accuracy and ECE, in percent).
pub fn render_run_tables(rows: &[SummaryRow], shots: &[usize]) -> String {
    let columns: Vec<String> = shots.iter().map(|s| format!("{s}-shot")).collect();
    type Pick = fn(&SummaryRow) -> Option<MeanStd>;
    let tables: [(&str, Metric, Pick); 4] = [
        ("Source accuracy (%)", Metric::Accuracy, |r| r.source_accuracy),
        ("Target accuracy (%)", Metric::Accuracy, |r| r.target_accuracy),
        ("Source ECE (%)", Metric::Ece, |r| r.source_ece),
        ("Target ECE (%)", Metric::Ece, |r| r.target_ece),
    ];
    let mut out = String::new();
    for (i, (title, metric, pick)) in tables.into_iter().enumerate() {
        let methods: Vec<(String, Vec<Option<f64>>)> = Variant::ALL
            .iter()
            .map(|&v| {
                let values = shots
                    .iter()
                    .map(|&s| {
                        rows.iter()
                            .find(|r| r.variant == v && r.shots == s)
                            .and_then(pick)
                            .map(|m| 100.0 * m.mean)
                    })
                    .collect();
                (v.label().to_string(), values)
            })
            .collect();
        if i > 0 {
            out.push('\n');
        }
        out.push_str(&results_table(title, metric, &columns, &methods));
    }
    out
}

fn save_last_good(path: &Path, rep: &Replicate, last_good: &[f64]) -> Result<()> {
    let params = ModelParams::from_checkpoint_vector(rep.init.dims(), last_good)?;
    save_checkpoint(path, &params, rep.seed)
}

/// Train every variant at every shot count and replicate. Each record is
/// written as soon as its run finishes, so failures leave the others intact.
pub fn run(cfg: &ExperimentConfig, rt: &Runtime, stdout: &mut dyn Write) -> Result<RunSummary> {
    let runs_dir = rt.out.join("runs");
    fs::create_dir_all(&runs_dir)?;
    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut timing = BTreeMap::new();
    for &shots in &cfg.shots {
        for (repeat, rep) in load_replicates(cfg, &rt.out, shots)?.iter().enumerate() {
            for variant in Variant::ALL {
                let (l1, l2) = variant.lambdas(cfg.train.lambda1, cfg.train.lambda2);
                let file = RunRecord::file_name(variant, shots, repeat);
                match run_replicate(rep, &cfg.train.clone().with_lambdas(l1, l2)) {
                    Ok((_, result)) => {
                        timing.insert(file.clone(), result.wall_time.as_secs_f64());
                        let record = RunRecord {
                            experiment: cfg.clone(),
                            variant,
                            shots,
                            repeat,
                            seed: rep.seed,
                            result,
                        };
                        write_text(&runs_dir.join(&file), &to_json(&record)?)?;
                        records.push(record);
                    }
                    Err(e) => {
                        if let Error::Training { last_good, .. } = &e {
                            save_last_good(&runs_dir.join(file.replace(".json", ".last-good.ckpt")), rep, last_good)?;
                        }
                        failures.push(RunFailure {
                            variant,
                            shots,
                            repeat,
                            error: e.to_string(),
                        });
                    }
                }
            }
        }
    }
    let summary = RunSummary {
        rows: summarize_records(&records, &cfg.shots),
        failures,
    };
    let tables = render_run_tables(&summary.rows, &cfg.shots);
    write_text(&rt.out.join("summary.json"), &to_json(&summary)?)?;
    write_text(&rt.out.join("summary.md"), &tables)?;
    write_text(&rt.out.join("timing.json"), &to_json(&timing)?)?;
    stdout.write_all(tables.as_bytes())?;
    if let Some(first) = summary.failures.first() {
        return Err(Error::Training {
            reason: format!(
                "{} of {} runs failed; first: {} {}-shot rep{}: {}",
                summary.failures.len(),
                summary.failures.len() + records.len(),
                first.variant.name(),
                first.shots,
                first.repeat,
                first.error
            ),
            epoch: 0,
            last_good: Vec::new(),
        });
    }
    Ok(summary)
}

/// λ₁ × λ₂ grid of one metric's means in percent, best cell in bold.
pub fn render_grid(
    title: &str,
    metric: Metric,
    cells: &[CellSummary],
    pick: fn(&CellSummary) -> Option<MeanStd>,
) -> String {
    let mut lambda1: Vec<f64> = Vec::new();
    let mut lambda2: Vec<f64> = Vec::new();
    for c in cells {
        if !lambda1.contains(&c.lambda1) {
            lambda1.push(c.lambda1);
        }
        if !lambda2.contains(&c.lambda2) {
            lambda2.push(c.lambda2);
        }
    }
    let mut best: Option<(f64, f64, f64)> = None;
    for c in cells {
        if let Some(m) = pick(c) {
            if best.is_none_or(|(_, _, b)| metric.better(m.mean, b)) {
                best = Some((c.lambda1, c.lambda2, m.mean));
            }
        }
    }
    let mut header = vec!["λ1 \\ λ2".to_string()];
    header.extend(lambda2.iter().map(|l| l.to_string()));
    let rows: Vec<Vec<String>> = lambda1
        .iter()
        .map(|&l1| {
            let mut row = vec![l1.to_string()];
            row.extend(lambda2.iter().map(|&l2| {
                let cell = cells.iter().find(|c| c.lambda1 == l1 && c.lambda2 == l2);
                match cell.and_then(pick) {
                    Some(m) => {
                        let v = format_value(metric, 100.0 * m.mean);
                        if best.is_some_and(|(b1, b2, _)| b1 == l1 && b2 == l2) {
                            format!("**{v}**")
                        } else {
                            v
                        }
                    }
                    None => "failed".into(),
                }
            }));
            row
        })
        .collect();
    markdown_table(title, &header, &rows)
}

/// Sweep the configured λ grids on the generated replicates at `sweep.shots`.
pub fn sweep(cfg: &ExperimentConfig, rt: &Runtime, stdout: &mut dyn Write) -> Result<Vec<SweepCell>> {
    let replicates: Vec<std::result::Result<Replicate, String>> = load_replicates(cfg, &rt.out, cfg.sweep.shots)?
        .into_iter()
        .map(Ok)
        .collect();
    let mut template = cfg.train.clone();
    template.seed = cfg.seed;
    let cells = sweep_replicates(&replicates, &cfg.sweep.grid1, &cfg.sweep.grid2, &template, rt.workers)?;
    let dir = rt.out.join("sweep");
    fs::create_dir_all(&dir)?;
    write_sweep_csv(
        &cells,
        Split::TargetTest,
        BufWriter::new(fs::File::create(dir.join("sweep.csv"))?),
    )?;
    write_text(&dir.join("cells.json"), &to_json(&cells)?)?;
    let summary = summarize(&cells);
    write_text(&dir.join("summary.json"), &to_json(&summary)?)?;
    let shots = cfg.sweep.shots;
    let tables = format!(
        "{}\n{}",
        render_grid(
            &format!("Target accuracy (%), {shots}-shot"),
            Metric::Accuracy,
            &summary,
            |c| c.target_accuracy
        ),
        render_grid(&format!("Target ECE (%), {shots}-shot"), Metric::Ece, &summary, |c| c
            .target_ece),
    );
    write_text(&dir.join("summary.md"), &tables)?;
    stdout.write_all(tables.as_bytes())?;
    let failed: Vec<&SweepCell> = cells.iter().filter(|c| c.outcome.is_err()).collect();
    if let Some(first) = failed.first() {
        return Err(Error::Training {
            reason: format!(
                "{} of {} sweep cells failed; first: λ1 = {}, λ2 = {}, rep{}: {}",
                failed.len(),
                cells.len(),
                first.lambda1,
                first.lambda2,
                first.repeat,
                first.outcome.as_ref().err().map_or("", String::as_str)
            ),
            epoch: 0,
            last_good: Vec::new(),
        });
    }
    Ok(cells)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CheckOptions {
    pub seed: u64,
    pub json: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub passed: bool,
    pub failing: Vec<String>,
    pub verdicts: Vec<Verdict>,
}

pub const CMP_TRIALS: usize = 10_000;
pub const GRADIENT_DRAWS: usize = 10;

/// Every property check, with the per-row penalty supplied by the caller.
pub fn check_report_with<F>(cmp: F, seed: u64) -> Result<CheckReport>
where
    F: Fn(&[f64], usize) -> f64,
{
    let root = RngStream::new(seed);
    let mut verdicts = Vec::new();

    let mut gaussian = Verdict {
        check: "fisher-kl gaussian-mean".into(),
        trials: 0,
        failures: 0,
        worst_gap: 0.0,
    };
    for (theta, sigma) in [(0.0, 1.0), (2.0, 0.5), (-1.0, 3.0)] {
        for r in fisher_kl_check(Family::GaussianMean { sigma }, theta, &delta_ladder(1.0, 10))? {
            gaussian.trials += 1;
            gaussian.failures += usize::from(!(r.relative_gap <= 1e-12));
            gaussian.worst_gap = gaussian.worst_gap.max(r.relative_gap);
        }
    }
    verdicts.push(gaussian);

    let mut bernoulli = Verdict {
        check: "fisher-kl bernoulli".into(),
        trials: 0,
        failures: 0,
        worst_gap: 0.0,
    };
    for theta in [0.5, 0.3, 0.9] {
        let ladder = fisher_kl_check(Family::Bernoulli, theta, &delta_ladder(0.05, 8))?;
        bernoulli.trials += 1;
        bernoulli.failures += usize::from(!gaps_shrink(&ladder, 1e-12));
        bernoulli.worst_gap = bernoulli.worst_gap.max(ladder.last().map_or(0.0, |r| r.relative_gap));
    }
    verdicts.push(bernoulli);

    let cmp_report = cmp_property_suite_with(cmp, &mut root.derive("cmp"), CMP_TRIALS)?;
    for p in &cmp_report.properties {
        verdicts.push(Verdict {
            check: p.property.clone(),
            trials: p.trials,
            failures: p.failures,
            worst_gap: if p.property == CMP_BOUNDS {
                cmp_report.worst_gap
            } else {
                0.0
            },
        });
    }

    let gradient = gradient_check(&mut root.derive("gradient"), GRADIENT_DRAWS, 200)?;
    verdicts.push(Verdict::from(&gradient));

    let failing: Vec<String> = verdicts
        .iter()
        .filter(|v| v.failures > 0)
        .map(|v| v.check.clone())
        .collect();
    Ok(CheckReport {
        passed: failing.is_empty(),
        failing,
        verdicts,
    })
}

/// Print the report and return the exit code.
pub fn render_check(report: &CheckReport, json: bool, stdout: &mut dyn Write) -> Result<i32> {
    if json {
        stdout.write_all(to_json(report)?.as_bytes())?;
    } else {
        for v in &report.verdicts {
            let status = if v.failures == 0 { "PASS" } else { "FAIL" };
            writeln!(
                stdout,
                "{status} {}: {} trials, {} failures, worst gap {:.3e}",
                v.check, v.trials, v.failures, v.worst_gap
            )?;
        }
        if !report.passed {
            writeln!(stdout, "failing checks: {}", report.failing.join(", "))?;
        }
    }
    Ok(if report.passed { EXIT_OK } else { EXIT_PROPERTY })
}

pub fn check_with<F>(cmp: F, opts: &CheckOptions, stdout: &mut dyn Write) -> Result<i32>
where
    F: Fn(&[f64], usize) -> f64,
{
    render_check(&check_report_with(cmp, opts.seed)?, opts.json, stdout)
}

pub fn check(opts: &CheckOptions, stdout: &mut dyn Write) -> Result<i32> {
    check_with(|row: &[f64], y: usize| cmp_sample(row, y), opts, stdout)
}
