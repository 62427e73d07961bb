//! Confusion matrix, derived binary-classification metrics and seed
//! aggregation. Label 1 (pneumonia) is the positive class.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::real::Real;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    fn merge(&self, other: &Self) -> Self {
        ConfusionMatrix {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
            tn: self.tn + other.tn,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: Real,
    pub precision: Real,
    pub recall: Real,
    pub f1: Real,
    pub matrix: ConfusionMatrix,
    pub seed: u64,
    pub wall_time_s: Real,
}

/// Tallies predictions against labels; a prediction is positive iff
/// `p >= threshold`.
pub fn confusion(probs: &[Real], labels: &[u8], threshold: Real) -> Result<ConfusionMatrix> {
    if probs.len() != labels.len() {
        return Err(Error::contract(
            "confusion",
            alloc::format!("{} predictions vs {} labels", probs.len(), labels.len()),
        ));
    }
    if probs.is_empty() {
        return Err(Error::contract("confusion", "no predictions"));
    }
    let mut m = ConfusionMatrix::default();
    for (&p, &y) in probs.iter().zip(labels) {
        match (p >= threshold, y != 0) {
            (true, true) => m.tp += 1,
            (true, false) => m.fp += 1,
            (false, true) => m.fn_ += 1,
            (false, false) => m.tn += 1,
        }
    }
    Ok(m)
}

fn ratio(num: u64, den: u64) -> Real {
    if den == 0 {
        0.0
    } else {
        num as Real / den as Real
    }
}

/// F1 as the harmonic mean; zero when both inputs are zero.
pub fn f1_score(precision: Real, recall: Real) -> Real {
    let s = precision + recall;
    if s == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / s
    }
}

/// Accuracy, precision, recall and F1 from a matrix. Undefined ratios
/// (zero denominators) are reported as 0.
pub fn derive(matrix: ConfusionMatrix) -> Result<MetricsReport> {
    let total = matrix.total();
    if total == 0 {
        return Err(Error::contract("derive", "empty confusion matrix"));
    }
    let precision = ratio(matrix.tp, matrix.tp + matrix.fp);
    let recall = ratio(matrix.tp, matrix.tp + matrix.fn_);
    Ok(MetricsReport {
        accuracy: ratio(matrix.tp + matrix.tn, total),
        precision,
        recall,
        f1: f1_score(precision, recall),
        matrix,
        seed: 0,
        wall_time_s: 0.0,
    })
}

/// Mean of every scalar metric (and wall time) across runs; matrices are
/// summed. The smallest seed is kept as the row's identifier.
pub fn aggregate(reports: &[MetricsReport]) -> Result<MetricsReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::contract("aggregate", "no reports"))?;
    let n = reports.len() as Real;
    // sort each column before summing so the mean does not depend on order
    let mean = |f: fn(&MetricsReport) -> Real| {
        let mut v: Vec<Real> = reports.iter().map(f).collect();
        v.sort_by(|a, b| a.total_cmp(b));
        v.iter().sum::<Real>() / n
    };
    Ok(MetricsReport {
        accuracy: mean(|r| r.accuracy),
        precision: mean(|r| r.precision),
        recall: mean(|r| r.recall),
        f1: mean(|r| r.f1),
        matrix: reports
            .iter()
            .fold(ConfusionMatrix::default(), |acc, r| acc.merge(&r.matrix)),
        seed: reports.iter().map(|r| r.seed).min().unwrap_or(first.seed),
        wall_time_s: mean(|r| r.wall_time_s),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_predictions() {
        let probs = [0.9, 0.8, 0.7, 0.6, 0.99, 0.1, 0.2, 0.3, 0.4, 0.0];
        let labels = [1, 1, 1, 1, 1, 0, 0, 0, 0, 0];
        let m = confusion(&probs, &labels, 0.5).unwrap();
        assert_eq!((m.tp, m.tn, m.fp, m.fn_), (5, 5, 0, 0));
        let r = derive(m).unwrap();
        assert_eq!((r.accuracy, r.f1), (1.0, 1.0));
    }

    #[test]
    fn constant_positive_predictor() {
        let probs = [1.0; 10];
        let labels = [1, 1, 1, 0, 0, 0, 0, 0, 0, 0];
        let m = confusion(&probs, &labels, 0.5).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_, m.tn), (3, 7, 0, 0));
    }

    #[test]
    fn threshold_is_inclusive() {
        let m = confusion(&[0.5], &[1], 0.5).unwrap();
        assert_eq!(m.tp, 1);
    }

    #[test]
    fn length_mismatch() {
        assert!(matches!(
            confusion(&[0.1, 0.2], &[1], 0.5),
            Err(Error::Contract { .. })
        ));
    }

    #[test]
    fn f1_degenerate_cases() {
        assert!((f1_score(0.4, 0.4) - 0.4).abs() < 1e-15);
        assert_eq!(f1_score(1.0, 0.0), 0.0);
        assert!((f1_score(0.7968, 0.9266) - 0.857).abs() < 0.001);
    }

    #[test]
    fn all_negative_predictor_has_zero_precision_recall_f1() {
        let m = ConfusionMatrix {
            tp: 0,
            fp: 0,
            fn_: 25,
            tn: 75,
        };
        let r = derive(m).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
        assert_eq!(r.accuracy, 0.75);
    }

    #[test]
    fn aggregate_examples() {
        let base = derive(ConfusionMatrix {
            tp: 4,
            fp: 1,
            fn_: 1,
            tn: 4,
        })
        .unwrap();
        assert_eq!(aggregate(core::slice::from_ref(&base)).unwrap(), base);
        let mut a = base.clone();
        a.accuracy = 0.8;
        let mut b = base.clone();
        b.accuracy = 0.9;
        assert!((aggregate(&[a, b]).unwrap().accuracy - 0.85).abs() < 1e-15);
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn aggregate_three_reports_matches_hand_means() {
        let mk = |acc, p, r, t| MetricsReport {
            accuracy: acc,
            precision: p,
            recall: r,
            f1: f1_score(p, r),
            matrix: ConfusionMatrix {
                tp: 1,
                fp: 2,
                fn_: 3,
                tn: 4,
            },
            seed: 42,
            wall_time_s: t,
        };
        let reps = [
            mk(0.8, 0.7, 0.9, 10.0),
            mk(0.7, 0.6, 0.8, 20.0),
            mk(0.9, 0.8, 1.0, 30.0),
        ];
        let m = aggregate(&reps).unwrap();
        assert!((m.accuracy - 0.8).abs() < 1e-12);
        assert!((m.precision - 0.7).abs() < 1e-12);
        assert!((m.recall - 0.9).abs() < 1e-12);
        assert!((m.wall_time_s - 20.0).abs() < 1e-12);
        let f1_mean = (f1_score(0.7, 0.9) + f1_score(0.6, 0.8) + f1_score(0.8, 1.0)) / 3.0;
        assert!((m.f1 - f1_mean).abs() < 1e-12);
        assert_eq!(m.matrix.total(), 30);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn derived_metrics_bounded(tp in 0u64..500, fp in 0u64..500, fn_ in 0u64..500, tn in 0u64..500) {
            prop_assume!(tp + fp + fn_ + tn > 0);
            let r = derive(ConfusionMatrix { tp, fp, fn_, tn }).unwrap();
            for v in [r.accuracy, r.precision, r.recall, r.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert!(r.f1 <= r.precision.max(r.recall) + 1e-12);
        }

        #[test]
        fn aggregate_is_permutation_invariant(accs in proptest::collection::vec(0.0f64..1.0, 1..8), rot in 0usize..8) {
            let reps: Vec<MetricsReport> = accs.iter().map(|&a| MetricsReport {
                accuracy: a as Real, precision: a as Real, recall: 1.0 - a as Real, f1: 0.5,
                matrix: ConfusionMatrix { tp: 1, fp: 1, fn_: 1, tn: 1 }, seed: 1, wall_time_s: a as Real,
            }).collect();
            let mut rotated = reps.clone();
            rotated.rotate_left(rot % reps.len());
            rotated.reverse();
            let (a, b) = (aggregate(&reps).unwrap(), aggregate(&rotated).unwrap());
            prop_assert_eq!(a.accuracy, b.accuracy);
            prop_assert_eq!(a.recall, b.recall);
            prop_assert_eq!(a.wall_time_s, b.wall_time_s);
        }
    }
}
