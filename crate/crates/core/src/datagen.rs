//! Synthetic covariate-shift scenarios: a Gaussian mixture source domain, a
//! translated and rescaled target domain, and one labeling rule shared by both.
//!
//! Labels are the hard Bayes labels of the source mixture. With equal priors
//! and a shared isotropic covariance the Bayes rule is nearest-mean, so
//! `P(y | x)` is identical in both domains while `P(x)` (and `P(x | y)`) moves.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{arg, Error, Result};
use crate::model::Batch;
use crate::numerics::{Matrix, RngStream};

/// Shot counts of the few-shot protocol.
pub const ALLOWED_SHOTS: [usize; 6] = [0, 1, 2, 4, 8, 16];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftScenario {
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Source class means, one row per class.
    pub component_means: Vec<Vec<f64>>,
    /// Per-coordinate standard deviation `σ` of every source component.
    pub component_cov_scale: f64,
    /// Translation of the target marginal.
    pub shift_vector: Vec<f64>,
    /// Target covariance multiplier.
    pub shift_scale: f64,
}

/// Nearest-mean classifier over the source means.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelingRule {
    means: Vec<Vec<f64>>,
}

impl LabelingRule {
    /// Class of `x`; on an exact tie the lowest class index wins.
    pub fn label(&self, x: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (k, m) in self.means.iter().enumerate() {
            let d2: f64 = m.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 < best.1 {
                best = (k, d2);
            }
        }
        best.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    SourceTrain,
    SourceTest,
    TargetTest,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::SourceTrain, Split::SourceTest, Split::TargetTest];

    pub fn name(self) -> &'static str {
        match self {
            Split::SourceTrain => "source-train",
            Split::SourceTest => "source-test",
            Split::TargetTest => "target-test",
        }
    }

    pub fn domain(self) -> Domain {
        match self {
            Split::SourceTrain | Split::SourceTest => Domain::Source,
            Split::TargetTest => Domain::Target,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|split| split.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown split {s:?}")))
    }
}

impl ShiftScenario {
    /// Classes on scaled coordinate axes so that every pair of means is
    /// `separation` apart; no shift.
    pub fn simplex(num_classes: usize, feature_dim: usize, separation: f64, sigma: f64) -> Result<Self> {
        if num_classes > feature_dim {
            return arg(format!(
                "{num_classes} axis-aligned classes need at least {num_classes} features"
            ));
        }
        let radius = separation / std::f64::consts::SQRT_2;
        let component_means = (0..num_classes)
            .map(|k| {
                let mut m = vec![0.0; feature_dim];
                m[k] = radius;
                m
            })
            .collect();
        let scenario = Self {
            num_classes,
            feature_dim,
            component_means,
            component_cov_scale: sigma,
            shift_vector: vec![0.0; feature_dim],
            shift_scale: 1.0,
        };
        scenario.validate()?;
        Ok(scenario)
    }

    /// Simplex classes with the target translated by `shift_magnitude` along
    /// the all-ones diagonal and its covariance scaled by `shift_scale`.
    pub fn simplex_diagonal_shift(
        num_classes: usize,
        feature_dim: usize,
        separation: f64,
        sigma: f64,
        shift_magnitude: f64,
        shift_scale: f64,
    ) -> Result<Self> {
        let step = shift_magnitude / (feature_dim.max(1) as f64).sqrt();
        Self::simplex(num_classes, feature_dim, separation, sigma)?.with_shift(vec![step; feature_dim], shift_scale)
    }

    pub fn with_shift(mut self, shift_vector: Vec<f64>, shift_scale: f64) -> Result<Self> {
        self.shift_vector = shift_vector;
        self.shift_scale = shift_scale;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return arg("a scenario needs at least two classes");
        }
        if self.feature_dim == 0 {
            return arg("feature dimension must be positive");
        }
        if self.component_means.len() != self.num_classes {
            return arg(format!(
                "{} means for {} classes",
                self.component_means.len(),
                self.num_classes
            ));
        }
        if let Some(k) = self.component_means.iter().position(|m| m.len() != self.feature_dim) {
            return arg(format!(
                "mean of class {k} does not have {} coordinates",
                self.feature_dim
            ));
        }
        if self.shift_vector.len() != self.feature_dim {
            return arg(format!(
                "shift vector has {} coordinates, expected {}",
                self.shift_vector.len(),
                self.feature_dim
            ));
        }
        let all_finite = self
            .component_means
            .iter()
            .flatten()
            .chain(&self.shift_vector)
            .all(|v| v.is_finite());
        if !all_finite {
            return arg("scenario contains non-finite coordinates");
        }
        if !(self.component_cov_scale > 0.0 && self.component_cov_scale.is_finite()) {
            return arg(format!(
                "component scale must be positive, got {}",
                self.component_cov_scale
            ));
        }
        if !(self.shift_scale > 0.0 && self.shift_scale.is_finite()) {
            return arg(format!("shift scale must be positive, got {}", self.shift_scale));
        }
        Ok(())
    }

    /// The labeling rule. It is derived from the source mixture only and is the
    /// same object whichever domain asks for it.
    pub fn labeling_rule(&self) -> LabelingRule {
        LabelingRule {
            means: self.component_means.clone(),
        }
    }

    pub fn is_null_shift(&self) -> bool {
        self.shift_vector.iter().all(|&v| v == 0.0) && self.shift_scale == 1.0
    }

    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("scenario serializes");
        hex::encode(Sha256::digest(json))
    }

    /// Mean of the marginal of `domain` (equal class priors).
    pub fn marginal_mean(&self, domain: Domain) -> Vec<f64> {
        let k = self.num_classes as f64;
        (0..self.feature_dim)
            .map(|j| {
                let m = self.component_means.iter().map(|mean| mean[j]).sum::<f64>() / k;
                match domain {
                    Domain::Source => m,
                    Domain::Target => m + self.shift_vector[j],
                }
            })
            .collect()
    }
}

/// Draw `n` labeled points from one domain.
pub fn sample_domain(scenario: &ShiftScenario, domain: Domain, n: usize, rng: &mut RngStream) -> Result<Batch<f64>> {
    scenario.validate()?;
    if n == 0 {
        return arg("sample size must be at least 1");
    }
    let d = scenario.feature_dim;
    let (offset, std) = match domain {
        Domain::Source => (vec![0.0; d], scenario.component_cov_scale),
        Domain::Target => (
            scenario.shift_vector.clone(),
            scenario.component_cov_scale * scenario.shift_scale.sqrt(),
        ),
    };
    let rule = scenario.labeling_rule();
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let component = &scenario.component_means[rng.index(scenario.num_classes)];
        let start = data.len();
        for j in 0..d {
            data.push(component[j] + offset[j] + std * rng.normal());
        }
        labels.push(rule.label(&data[start..]));
    }
    Batch::new(Matrix::from_row_major(n, d, data)?, labels)
}

/// Exactly `shots` samples of each class, drawn without replacement and listed
/// class by class. `shots = 0` gives the empty zero-shot batch.
pub fn few_shot_split(batch: &Batch<f64>, shots: usize, num_classes: usize, rng: &mut RngStream) -> Result<Batch<f64>> {
    if !ALLOWED_SHOTS.contains(&shots) {
        return arg(format!("shots must be one of {ALLOWED_SHOTS:?}, got {shots}"));
    }
    if shots == 0 {
        return Ok(Batch::empty(batch.feature_dim()));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &y) in batch.labels.iter().enumerate() {
        if y >= num_classes {
            return Err(Error::Data(format!("label {y} out of range for {num_classes} classes")));
        }
        by_class[y].push(i);
    }
    let mut chosen = Vec::with_capacity(shots * num_classes);
    for (k, indices) in by_class.iter_mut().enumerate() {
        if indices.len() < shots {
            return Err(Error::Data(format!(
                "class {k} has {} samples, {shots} shots requested",
                indices.len()
            )));
        }
        rng.shuffle(indices);
        chosen.extend_from_slice(&indices[..shots]);
    }
    Ok(batch.select(&chosen))
}

/// Description of one dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub scenario: ShiftScenario,
    pub scenario_hash: String,
    pub seed: u64,
    pub split: Split,
    pub n: usize,
    pub path: PathBuf,
    pub sha256: String,
}

impl DatasetManifest {
    /// Manifest for a file yet to be written; `n` and `sha256` are filled in by
    /// [`save_dataset`].
    pub fn new(scenario: &ShiftScenario, seed: u64, split: Split, path: impl Into<PathBuf>) -> Self {
        Self {
            scenario: scenario.clone(),
            scenario_hash: scenario.hash(),
            seed,
            split,
            n: 0,
            path: path.into(),
            sha256: String::new(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let manifest: Self = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        if manifest.scenario_hash != manifest.scenario.hash() {
            return Err(Error::Schema(format!(
                "{}: scenario hash does not match scenario",
                path.display()
            )));
        }
        Ok(manifest)
    }
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let mut file = File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let read = file.read(&mut buf)?;
        if read == 0 {
            break;
        }
        hasher.update(&buf[..read]);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn csv_header(feature_dim: usize) -> Vec<String> {
    (0..feature_dim)
        .map(|j| format!("f{j}"))
        .chain(std::iter::once("label".to_string()))
        .collect()
}

/// Write `batch` as CSV to `manifest.path`, then record its row count and
/// checksum in the manifest.
pub fn save_dataset(batch: &Batch<f64>, manifest: &mut DatasetManifest) -> Result<()> {
    if batch.feature_dim() != manifest.scenario.feature_dim {
        return Err(Error::Schema(format!(
            "batch has {} features, scenario has {}",
            batch.feature_dim(),
            manifest.scenario.feature_dim
        )));
    }
    let mut w = csv::Writer::from_path(&manifest.path)?;
    w.write_record(csv_header(batch.feature_dim()))?;
    for i in 0..batch.len() {
        // `{}` on f64 prints the shortest string that parses back bit-exactly.
        let record = batch
            .row(i)
            .iter()
            .map(|v| v.to_string())
            .chain(std::iter::once(batch.labels[i].to_string()));
        w.write_record(record)?;
    }
    w.flush()?;
    drop(w);
    manifest.n = batch.len();
    manifest.sha256 = file_sha256(&manifest.path)?;
    Ok(())
}

pub fn load_dataset(manifest: &DatasetManifest) -> Result<Batch<f64>> {
    let path = &manifest.path;
    let schema = |msg: String| Error::Schema(format!("{}: {msg}", path.display()));
    let d = manifest.scenario.feature_dim;
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != csv_header(d) {
        return Err(schema(format!(
            "header {header:?} does not match {d} features plus label"
        )));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (line, record) in r.records().enumerate() {
        let record = record?;
        for field in record.iter().take(d) {
            let v: f64 = field
                .parse()
                .map_err(|_| schema(format!("row {line}: bad number {field:?}")))?;
            data.push(v);
        }
        let label: usize = record[d]
            .parse()
            .map_err(|_| schema(format!("row {line}: bad label {:?}", &record[d])))?;
        if label >= manifest.scenario.num_classes {
            return Err(schema(format!("row {line}: label {label} out of range")));
        }
        labels.push(label);
    }
    if labels.len() != manifest.n {
        return Err(schema(format!("{} rows, manifest says {}", labels.len(), manifest.n)));
    }
    if !manifest.sha256.is_empty() && file_sha256(path)? != manifest.sha256 {
        return Err(schema("checksum does not match manifest".into()));
    }
    Batch::new(Matrix::from_row_major(labels.len(), d, data)?, labels)
}

/// Uniform points on the box spanned by the source means, padded by `3σ` plus
/// the shift on every side, for comparing labeling rules pointwise.
pub fn probe_grid(scenario: &ShiftScenario, n: usize, rng: &mut RngStream) -> Vec<Vec<f64>> {
    let pad = 3.0 * scenario.component_cov_scale * scenario.shift_scale.sqrt().max(1.0);
    let bounds: Vec<(f64, f64)> = (0..scenario.feature_dim)
        .map(|j| {
            let (lo, hi) = scenario
                .component_means
                .iter()
                .map(|m| m[j])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            let s = scenario.shift_vector[j];
            (lo.min(lo + s) - pad, hi.max(hi + s) + pad)
        })
        .collect();
    (0..n)
        .map(|_| bounds.iter().map(|&(lo, hi)| lo + (hi - lo) * rng.uniform()).collect())
        .collect()
}

/// Two-sample z-test of equal feature means, one test per coordinate with a
/// Bonferroni correction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanEqualityTest {
    pub z: Vec<f64>,
    /// Smallest two-sided per-coordinate p-value times the number of coordinates, capped at 1.
    pub p_value: f64,
}

impl MeanEqualityTest {
    pub fn passes(&self, alpha: f64) -> bool {
        self.p_value >= alpha
    }
}

pub fn mean_equality_z_test(a: &Batch<f64>, b: &Batch<f64>) -> Result<MeanEqualityTest> {
    if a.len() < 2 || b.len() < 2 {
        return arg("z-test needs at least two samples per group");
    }
    if a.feature_dim() != b.feature_dim() {
        return arg("z-test groups have different feature dimensions");
    }
    let moments = |batch: &Batch<f64>, j: usize| {
        let n = batch.len() as f64;
        let mean = (0..batch.len()).map(|i| batch.row(i)[j]).sum::<f64>() / n;
        let var = (0..batch.len()).map(|i| (batch.row(i)[j] - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var / n)
    };
    let std_normal = Normal::standard();
    let d = a.feature_dim();
    let mut z = Vec::with_capacity(d);
    let mut min_p = 1.0f64;
    for j in 0..d {
        let (ma, va) = moments(a, j);
        let (mb, vb) = moments(b, j);
        let se = (va + vb).sqrt();
        let zj = if se > 0.0 { (ma - mb) / se } else { 0.0 };
        min_p = min_p.min(2.0 * std_normal.sf(zj.abs()));
        z.push(zj);
    }
    Ok(MeanEqualityTest {
        z,
        p_value: (min_p * d as f64).min(1.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_class() -> ShiftScenario {
        ShiftScenario {
            num_classes: 2,
            feature_dim: 2,
            component_means: vec![vec![1.0, 0.0], vec![-1.0, 0.0]],
            component_cov_scale: 0.5,
            shift_vector: vec![0.0, 0.0],
            shift_scale: 1.0,
        }
    }

    #[test]
    fn rule_is_sign_of_first_coordinate() {
        let shifted = two_class().with_shift(vec![-3.0, 1.0], 4.0).unwrap();
        let rule = shifted.labeling_rule();
        assert_eq!(rule.label(&[2.0, 0.0]), 0);
        assert_eq!(rule.label(&[-0.1, 5.0]), 1);
        assert_eq!(rule, two_class().labeling_rule());
    }

    #[test]
    fn samples_follow_the_rule_in_both_domains() {
        let s = two_class().with_shift(vec![0.7, -0.3], 2.0).unwrap();
        let rule = s.labeling_rule();
        for domain in [Domain::Source, Domain::Target] {
            let b = sample_domain(&s, domain, 500, &mut RngStream::new(3)).unwrap();
            for i in 0..b.len() {
                assert_eq!(b.labels[i], rule.label(b.row(i)));
            }
        }
    }

    #[test]
    fn target_mean_is_translated() {
        let s = two_class().with_shift(vec![1.5, -2.0], 2.0).unwrap();
        let n = 100_000;
        let b = sample_domain(&s, Domain::Target, n, &mut RngStream::new(11)).unwrap();
        let expected = s.marginal_mean(Domain::Target);
        // Marginal variance per coordinate: mixture spread plus component noise.
        let var = [1.0 + 0.25 * 2.0, 0.25 * 2.0];
        for j in 0..2 {
            let mean = (0..n).map(|i| b.row(i)[j]).sum::<f64>() / n as f64;
            assert!(
                (mean - expected[j]).abs() < 3.0 * (var[j] / n as f64).sqrt(),
                "coord {j}: {mean}"
            );
        }
    }

    #[test]
    fn diagonal_shift_has_requested_length() {
        let s = ShiftScenario::simplex_diagonal_shift(3, 16, 2.0, 1.0, 2.0, 2.0).unwrap();
        let len = s.shift_vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((len - 2.0).abs() < 1e-12);
        let d01: f64 = (0..16)
            .map(|j| (s.component_means[0][j] - s.component_means[1][j]).powi(2))
            .sum();
        assert!((d01.sqrt() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn empty_sample_rejected() {
        assert!(sample_domain(&two_class(), Domain::Source, 0, &mut RngStream::new(0)).is_err());
        assert!(two_class().with_shift(vec![0.0, 0.0], 0.0).is_err());
        assert!(two_class().with_shift(vec![0.0], 1.0).is_err());
    }

    #[test]
    fn few_shot_counts_and_determinism() {
        let s = ShiftScenario::simplex(3, 4, 2.0, 0.5).unwrap();
        let pool = sample_domain(&s, Domain::Source, 300, &mut RngStream::new(1)).unwrap();
        let one = few_shot_split(&pool, 1, 3, &mut RngStream::new(5)).unwrap();
        assert_eq!(one.class_counts(3), vec![1, 1, 1]);
        let a = few_shot_split(&pool, 8, 3, &mut RngStream::new(5)).unwrap();
        let b = few_shot_split(&pool, 8, 3, &mut RngStream::new(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.class_counts(3), vec![8, 8, 8]);
        assert!(few_shot_split(&pool, 0, 3, &mut RngStream::new(5)).unwrap().is_empty());
        assert!(few_shot_split(&pool, 3, 3, &mut RngStream::new(5)).is_err());
    }

    #[test]
    fn few_shot_names_deficient_class() {
        let b = Batch::new(
            Matrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap(),
            vec![0, 0, 1],
        )
        .unwrap();
        match few_shot_split(&b, 2, 2, &mut RngStream::new(0)) {
            Err(Error::Data(msg)) => assert!(msg.contains("class 1"), "{msg}"),
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let s = ShiftScenario::simplex(3, 5, 2.0, 0.7).unwrap();
        let reparsed: ShiftScenario = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(s.hash(), reparsed.hash());
        let mut moved = s.clone();
        moved.shift_vector[0] = 0.1;
        assert_ne!(s.hash(), moved.hash());
        let mut wider = s.clone();
        wider.component_cov_scale = 0.71;
        assert_ne!(s.hash(), wider.hash());
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let s = ShiftScenario::simplex(3, 4, 2.0, 0.5).unwrap();
        let b = sample_domain(&s, Domain::Source, 50, &mut RngStream::new(2)).unwrap();
        let mut m = DatasetManifest::new(&s, 2, Split::SourceTrain, dir.path().join("d.csv"));
        save_dataset(&b, &mut m).unwrap();
        assert_eq!(m.n, 50);
        let back = load_dataset(&m).unwrap();
        assert_eq!(back.labels, b.labels);
        for (x, y) in back.features.as_slice().iter().zip(b.features.as_slice()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        let text = std::fs::read_to_string(&m.path).unwrap();
        assert!(text.starts_with("f0,f1,f2,f3,label\n"));

        let manifest_path = dir.path().join("d.json");
        m.write(&manifest_path).unwrap();
        assert_eq!(DatasetManifest::read(&manifest_path).unwrap(), m);
    }

    #[test]
    fn row_count_mismatch_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let s = two_class();
        let b = sample_domain(&s, Domain::Source, 10, &mut RngStream::new(2)).unwrap();
        let mut m = DatasetManifest::new(&s, 2, Split::SourceTest, dir.path().join("d.csv"));
        save_dataset(&b, &mut m).unwrap();
        m.n = 11;
        assert!(matches!(load_dataset(&m), Err(Error::Schema(_))));
    }

    #[test]
    fn null_shift_passes_and_real_shift_fails_z_test() {
        let s = ShiftScenario::simplex(3, 4, 2.0, 0.5).unwrap();
        assert!(s.is_null_shift());
        let src = sample_domain(&s, Domain::Source, 10_000, &mut RngStream::new(7)).unwrap();
        let tgt = sample_domain(&s, Domain::Target, 10_000, &mut RngStream::new(8)).unwrap();
        assert!(mean_equality_z_test(&src, &tgt).unwrap().passes(0.001));
        let shifted = s.with_shift(vec![0.2, 0.0, 0.0, 0.0], 1.0).unwrap();
        let tgt = sample_domain(&shifted, Domain::Target, 10_000, &mut RngStream::new(8)).unwrap();
        assert!(!mean_equality_z_test(&src, &tgt).unwrap().passes(0.001));
    }

    #[test]
    fn split_names_round_trip() {
        for split in Split::ALL {
            assert_eq!(split.name().parse::<Split>().unwrap(), split);
            assert_eq!(serde_json::to_string(&split).unwrap(), format!("\"{}\"", split.name()));
        }
    }
}
