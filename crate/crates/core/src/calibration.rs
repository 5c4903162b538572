//! Expected Calibration Error, reliability-diagram bins and accuracy.
//!
//! Confidence is the row maximum and the prediction is the arg-max (lowest
//! index on ties). Bins are equal-width on `(0, 1]` and right-closed: bin `k`
//! (1-based) holds `((k−1)/B, k/B]`, with confidence `0` placed in bin 1.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{arg, Result};
use crate::losses::{argmax, ProbBatch};
use crate::scalar::Scalar;

pub const DEFAULT_NUM_BINS: usize = 15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub empirical_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub ece: f64,
    pub bins: Vec<ReliabilityBin>,
    pub accuracy: f64,
    pub n: usize,
}

impl CalibrationReport {
    /// Reliability-diagram rows for external plotting.
    pub fn write_reliability_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["bin_lower", "bin_upper", "count", "mean_conf", "emp_acc"])?;
        for b in &self.bins {
            w.write_record([
                b.lower.to_string(),
                b.upper.to_string(),
                b.count.to_string(),
                b.mean_confidence.to_string(),
                b.empirical_accuracy.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn ece_percent(&self) -> f64 {
        self.ece * 100.0
    }
}

fn bin_lower(k: usize, num_bins: usize) -> f64 {
    (k - 1) as f64 / num_bins as f64
}

fn bin_upper(k: usize, num_bins: usize) -> f64 {
    k as f64 / num_bins as f64
}

/// 1-based bin of confidence `c`, consistent with the bounds returned by
/// `bin_lower`/`bin_upper` even where `c·B` rounds across an integer.
fn bin_of(c: f64, num_bins: usize) -> usize {
    let mut k = ((c * num_bins as f64).ceil() as usize).clamp(1, num_bins);
    if k > 1 && c <= bin_upper(k - 1, num_bins) {
        k -= 1;
    } else if k < num_bins && c > bin_upper(k, num_bins) {
        k += 1;
    }
    k
}

/// Sum that does not depend on the order values arrive in.
fn order_free_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

fn confidence_and_hit<T: Scalar>(pb: &ProbBatch<T>, i: usize) -> (f64, bool) {
    let row = pb.row(i);
    let pred = argmax(row);
    (row[pred].as_f64(), pred == pb.labels[i])
}

pub fn ece<T: Scalar>(pb: &ProbBatch<T>, num_bins: usize) -> Result<CalibrationReport> {
    if pb.is_empty() {
        return arg("calibration of an empty batch");
    }
    if num_bins == 0 {
        return arg("number of bins must be positive");
    }
    let n = pb.len();
    let mut confidences: Vec<Vec<f64>> = vec![Vec::new(); num_bins];
    let mut hits = vec![0usize; num_bins];
    let mut total_hits = 0usize;
    for i in 0..n {
        let (c, hit) = confidence_and_hit(pb, i);
        let k = bin_of(c, num_bins) - 1;
        confidences[k].push(c);
        if hit {
            hits[k] += 1;
            total_hits += 1;
        }
    }
    let mut ece = 0.0;
    let bins = (0..num_bins)
        .map(|k| {
            let count = confidences[k].len();
            let (mean_confidence, empirical_accuracy) = if count == 0 {
                (0.0, 0.0)
            } else {
                let conf = order_free_sum(&mut confidences[k]) / count as f64;
                let acc = hits[k] as f64 / count as f64;
                ece += count as f64 / n as f64 * (acc - conf).abs();
                (conf, acc)
            };
            ReliabilityBin {
                lower: bin_lower(k + 1, num_bins),
                upper: bin_upper(k + 1, num_bins),
                count,
                mean_confidence,
                empirical_accuracy,
            }
        })
        .collect();
    Ok(CalibrationReport {
        ece,
        bins,
        accuracy: total_hits as f64 / n as f64,
        n,
    })
}

/// Reference ECE: for every bin, scan all samples and test interval membership
/// directly.
pub fn brute_force_ece<T: Scalar>(pb: &ProbBatch<T>, num_bins: usize) -> Result<f64> {
    if pb.is_empty() {
        return arg("calibration of an empty batch");
    }
    if num_bins == 0 {
        return arg("number of bins must be positive");
    }
    let n = pb.len() as f64;
    let mut total = 0.0;
    for k in 1..=num_bins {
        let (lo, hi) = (bin_lower(k, num_bins), bin_upper(k, num_bins));
        let mut count = 0usize;
        let mut conf_sum = 0.0;
        let mut correct = 0usize;
        for i in 0..pb.len() {
            let row = pb.row(i);
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            let c = row[best].as_f64();
            let inside = (c > lo && c <= hi) || (k == 1 && c == 0.0);
            if inside {
                count += 1;
                conf_sum += c;
                if best == pb.labels[i] {
                    correct += 1;
                }
            }
        }
        if count > 0 {
            let m = count as f64;
            total += (m / n) * (correct as f64 / m - conf_sum / m).abs();
        }
    }
    Ok(total)
}

pub fn accuracy<T: Scalar>(pb: &ProbBatch<T>) -> Result<f64> {
    if pb.is_empty() {
        return arg("accuracy of an empty batch");
    }
    let hits = (0..pb.len()).filter(|&i| confidence_and_hit(pb, i).1).count();
    Ok(hits as f64 / pb.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(rows: &[Vec<f64>], labels: &[usize]) -> ProbBatch<f64> {
        ProbBatch::from_rows(rows, labels.to_vec()).unwrap()
    }

    fn four_sample() -> ProbBatch<f64> {
        batch(
            &[vec![0.65, 0.35], vec![0.65, 0.35], vec![0.95, 0.05], vec![0.05, 0.95]],
            &[0, 1, 0, 1],
        )
    }

    #[test]
    fn perfect_predictions() {
        let pb = batch(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0, 1]);
        let r = ece(&pb, 15).unwrap();
        assert_eq!(r.ece, 0.0);
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.bins[14].count, 2);
    }

    #[test]
    fn two_samples_one_bin() {
        let pb = batch(&[vec![0.9, 0.1], vec![0.9, 0.1]], &[0, 1]);
        let r = ece(&pb, 10).unwrap();
        assert!((r.ece - 0.4).abs() < 1e-15);
        assert!((brute_force_ece(&pb, 10).unwrap() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn four_sample_hand_case() {
        let pb = four_sample();
        let r = ece(&pb, 10).unwrap();
        assert!((r.ece - 0.10).abs() < 1e-15, "{}", r.ece);
        assert!((brute_force_ece(&pb, 10).unwrap() - 0.10).abs() < 1e-15);
        assert_eq!(r.bins[6].count, 2);
        assert_eq!(r.bins[9].count, 2);
    }

    #[test]
    fn boundaries_are_right_closed() {
        // 0.3 * 10 rounds to 3.0000000000000004; it still belongs to bin 3.
        assert_eq!(bin_of(0.3, 10), 3);
        assert_eq!(bin_of(1.0, 15), 15);
        assert_eq!(bin_of(0.0, 15), 1);
        for k in 1..=15 {
            assert_eq!(bin_of(bin_upper(k, 15), 15), k);
        }
        let pb = batch(&[vec![0.3, 0.3, 0.4]], &[2]);
        let r = ece(&pb, 10).unwrap();
        assert_eq!(r.bins[3].count, 1);
    }

    #[test]
    fn empty_bins_contribute_nothing() {
        let pb = batch(&[vec![0.8, 0.2]], &[0]);
        let r = ece(&pb, 100).unwrap();
        assert_eq!(r.bins.iter().filter(|b| b.count > 0).count(), 1);
        assert!((r.ece - 0.2).abs() < 1e-15);
        assert_eq!(brute_force_ece(&pb, 100).unwrap(), r.ece);
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(
            accuracy(&batch(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0, 1])).unwrap(),
            1.0
        );
        assert_eq!(
            accuracy(&batch(&[vec![0.5, 0.5], vec![0.5, 0.5]], &[0, 0])).unwrap(),
            1.0
        );
        assert_eq!(
            accuracy(&batch(&[vec![0.2, 0.8], vec![0.9, 0.1]], &[0, 0])).unwrap(),
            0.5
        );
    }

    #[test]
    fn empty_batch_errors() {
        let pb = ProbBatch::<f64>::new(crate::numerics::Matrix::zeros(0, 2), vec![]).unwrap();
        assert!(ece(&pb, 10).is_err());
        assert!(brute_force_ece(&pb, 10).is_err());
        assert!(accuracy(&pb).is_err());
        assert!(ece(&four_sample(), 0).is_err());
    }

    #[test]
    fn reliability_csv_layout() {
        let r = ece(&four_sample(), 2).unwrap();
        let mut buf = Vec::new();
        r.write_reliability_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "bin_lower,bin_upper,count,mean_conf,emp_acc"
        );
        assert_eq!(text.lines().count(), 3);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn prob_batch() -> impl Strategy<Value = ProbBatch<f64>> {
            (2usize..6, 1usize..40).prop_flat_map(|(k, n)| {
                (
                    prop::collection::vec(prop::collection::vec(-4.0f64..4.0, k), n),
                    prop::collection::vec(0..k, n),
                )
                    .prop_map(|(logits, labels)| {
                        let rows: Vec<Vec<f64>> = logits
                            .iter()
                            .map(|z| crate::numerics::softmax(z).unwrap().to_vec())
                            .collect();
                        ProbBatch::from_rows(&rows, labels).unwrap()
                    })
            })
        }

        proptest! {
            #[test]
            fn matches_brute_force(pb in prob_batch(), bins in prop::sample::select(vec![1usize, 10, 15, 100])) {
                let r = ece(&pb, bins).unwrap();
                prop_assert!((r.ece - brute_force_ece(&pb, bins).unwrap()).abs() <= 1e-12);
                prop_assert!((0.0..=1.0).contains(&r.ece));
                let recomposed: f64 = r.bins.iter().filter(|b| b.count > 0)
                    .map(|b| b.count as f64 / r.n as f64 * (b.empirical_accuracy - b.mean_confidence).abs())
                    .sum();
                prop_assert!((recomposed - r.ece).abs() <= 1e-12);
                for b in r.bins.iter().filter(|b| b.count > 0) {
                    prop_assert!(b.lower <= b.mean_confidence && b.mean_confidence <= b.upper);
                }
            }

            #[test]
            fn permutation_is_bit_identical(pb in prob_batch(), seed in any::<u64>()) {
                let mut order: Vec<usize> = (0..pb.len()).collect();
                crate::numerics::RngStream::new(seed).shuffle(&mut order);
                let rows: Vec<Vec<f64>> = order.iter().map(|&i| pb.row(i).to_vec()).collect();
                let labels = order.iter().map(|&i| pb.labels[i]).collect();
                let shuffled = ProbBatch::from_rows(&rows, labels).unwrap();
                let (a, b) = (ece(&pb, 15).unwrap(), ece(&shuffled, 15).unwrap());
                prop_assert_eq!(a.ece.to_bits(), b.ece.to_bits());
                prop_assert_eq!(a.accuracy.to_bits(), b.accuracy.to_bits());
            }

            #[test]
            fn accuracy_invariant_under_monotone_transform(pb in prob_batch()) {
                // p -> p^3, renormalized: strictly monotone per row.
                let rows: Vec<Vec<f64>> = (0..pb.len()).map(|i| {
                    let cubed: Vec<f64> = pb.row(i).iter().map(|p| p.powi(3)).collect();
                    let s: f64 = cubed.iter().sum();
                    cubed.iter().map(|v| v / s).collect()
                }).collect();
                let transformed = ProbBatch::from_rows(&rows, pb.labels.clone()).unwrap();
                prop_assert_eq!(accuracy(&pb).unwrap(), accuracy(&transformed).unwrap());
            }
        }
    }
}
