//! Confusion matrix, sensitivity/specificity, ROC curve and AUC over anomaly
//! scores versus ground truth.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::detect::{segment_quadrants, PredictionRecord, QuadrantReport};
use crate::error::{Error, Result};

/// Binary-classifier counts: X (true positive), Y (false negative),
/// Z (false positive), W (true negative).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub true_positive: u64,
    pub false_negative: u64,
    pub false_positive: u64,
    pub true_negative: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.true_positive + self.false_negative + self.false_positive + self.true_negative
    }
}

/// Counts at a threshold: an item is predicted positive iff score >= threshold.
pub fn confusion(items: &[(f64, bool)], threshold: f64) -> ConfusionMatrix {
    let mut cm = ConfusionMatrix::default();
    for &(score, label) in items {
        match (score >= threshold, label) {
            (true, true) => cm.true_positive += 1,
            (true, false) => cm.false_positive += 1,
            (false, true) => cm.false_negative += 1,
            (false, false) => cm.true_negative += 1,
        }
    }
    cm
}

/// True-positive rate X/(X+Y); `None` marks the degenerate no-positives case.
pub fn sensitivity(cm: &ConfusionMatrix) -> Option<f64> {
    let denom = cm.true_positive + cm.false_negative;
    if denom == 0 {
        return None;
    }
    Some(cm.true_positive as f64 / denom as f64)
}

/// True-negative rate W/(Z+W); `None` marks the degenerate no-negatives case.
pub fn specificity(cm: &ConfusionMatrix) -> Option<f64> {
    let denom = cm.false_positive + cm.true_negative;
    if denom == 0 {
        return None;
    }
    Some(cm.true_negative as f64 / denom as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Score cutoff producing this point (predicted positive iff score >= it).
    /// +infinity for the (0,0) endpoint.
    pub threshold: f64,
    pub false_positive_rate: f64,
    pub true_positive_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

impl RocCurve {
    /// CSV rows `threshold,fpr,tpr`.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "threshold,fpr,tpr")?;
        for p in &self.points {
            writeln!(
                w,
                "{},{},{}",
                p.threshold, p.false_positive_rate, p.true_positive_rate
            )?;
        }
        Ok(())
    }
}

/// ROC over scored binary items: one point per distinct score (thresholds
/// swept descending, ties grouped) plus the (0,0) endpoint; the final point
/// is always (1,1) at the minimum score. The AUC is the trapezoidal area,
/// accumulated over integer counts so it is exactly the pairwise
/// win+half-tie statistic.
pub fn roc(items: &[(f64, bool)]) -> Result<RocCurve> {
    let positives = items.iter().filter(|(_, l)| *l).count() as u64;
    let negatives = items.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::SingleClassRoc);
    }

    let mut sorted: Vec<(f64, bool)> = items.to_vec();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite scores"));

    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        false_positive_rate: 0.0,
        true_positive_rate: 0.0,
    }];
    let mut tp: u64 = 0;
    let mut fp: u64 = 0;
    let mut area2: u128 = 0; // 2x the area, in count units
    let mut i = 0;
    while i < sorted.len() {
        let score = sorted[i].0;
        let (mut d_tp, mut d_fp) = (0u64, 0u64);
        while i < sorted.len() && sorted[i].0 == score {
            if sorted[i].1 {
                d_tp += 1;
            } else {
                d_fp += 1;
            }
            i += 1;
        }
        area2 += d_fp as u128 * (2 * tp + d_tp) as u128;
        tp += d_tp;
        fp += d_fp;
        points.push(RocPoint {
            threshold: score,
            false_positive_rate: fp as f64 / negatives as f64,
            true_positive_rate: tp as f64 / positives as f64,
        });
    }

    let auc = area2 as f64 / (2 * positives * negatives) as f64;
    Ok(RocCurve { points, auc })
}

/// Per-user evaluation summary, serialized as `<user>.summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserSummary {
    pub user: String,
    /// AUC of anomaly_score against the red-team labels; absent when only
    /// one class is present (the paper's N/A case).
    pub auc: Option<f64>,
    /// Next-event prediction quality (fraction of correct argmax guesses).
    pub top1_accuracy: f64,
    /// Whether any red-team record appears among the k lowest-probability
    /// incorrect predictions; absent when there are no red-team labels.
    pub threat_in_top_k: Option<bool>,
    pub counts: SummaryCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryCounts {
    pub predictions: usize,
    pub red_team: usize,
    pub correct: usize,
    pub high_correct: usize,
    pub high_incorrect: usize,
    pub low_correct: usize,
    pub low_incorrect: usize,
}

/// Full evaluation of one user's predictions: ROC/AUC over anomaly scores
/// (score = 1 - p[actual], positive = red team), top-1 accuracy, quadrant
/// counts and the threat-in-top-k flag.
pub fn evaluate_user(
    user: &str,
    records: &[PredictionRecord],
    threshold: f64,
    k: usize,
) -> (UserSummary, Option<RocCurve>, QuadrantReport) {
    let report = segment_quadrants(records, threshold, k);
    let red_count = records.iter().filter(|r| r.is_red_team).count();
    let correct = records.iter().filter(|r| r.correct).count();
    let top1_accuracy = if records.is_empty() {
        0.0
    } else {
        correct as f64 / records.len() as f64
    };

    let scored: Vec<(f64, bool)> = records
        .iter()
        .map(|r| (r.anomaly_score, r.is_red_team))
        .collect();
    let curve = match roc(&scored) {
        Ok(c) => Some(c),
        Err(Error::SingleClassRoc) => {
            log::warn!("user {user}: ROC unavailable (single-class labels)");
            None
        }
        Err(_) => None,
    };

    let threat_in_top_k = if red_count == 0 {
        None
    } else {
        Some(report.ranked_low_incorrect.iter().any(|r| r.is_red_team))
    };

    let summary = UserSummary {
        user: user.to_string(),
        auc: curve.as_ref().map(|c| c.auc),
        top1_accuracy,
        threat_in_top_k,
        counts: SummaryCounts {
            predictions: records.len(),
            red_team: red_count,
            correct,
            high_correct: report.high_correct,
            high_incorrect: report.high_incorrect,
            low_correct: report.low_correct,
            low_incorrect: report.low_incorrect,
        },
    };
    (summary, curve, report)
}

/// Reads a ROC CSV written by `RocCurve::write_csv` (plot plumbing).
pub fn read_roc_csv(r: impl BufRead) -> Result<Vec<RocPoint>> {
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if lineno == 0 || line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::MalformedFile {
                path: "<roc>".into(),
                reason: format!("line {}: expected 3 fields", lineno + 1),
            });
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::MalformedFile {
                path: "<roc>".into(),
                reason: format!("line {}: bad number {s}", lineno + 1),
            })
        };
        out.push(RocPoint {
            threshold: parse(fields[0])?,
            false_positive_rate: parse(fields[1])?,
            true_positive_rate: parse(fields[2])?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn confusion_examples() {
        let items = [(0.9, true), (0.2, false)];
        let cm = confusion(&items, 0.5);
        assert_eq!(
            cm,
            ConfusionMatrix {
                true_positive: 1,
                false_negative: 0,
                false_positive: 0,
                true_negative: 1
            }
        );

        let all_pos = confusion(&items, 0.0);
        assert_eq!(all_pos.false_negative + all_pos.true_negative, 0);

        let all_neg = confusion(&items, 0.91);
        assert_eq!(all_neg.true_positive + all_neg.false_positive, 0);
    }

    #[test]
    fn sensitivity_specificity_examples() {
        let cm = ConfusionMatrix {
            true_positive: 8,
            false_negative: 2,
            false_positive: 1,
            true_negative: 9,
        };
        assert_eq!(sensitivity(&cm), Some(0.8));
        assert_eq!(specificity(&cm), Some(0.9));

        let perfect = ConfusionMatrix {
            true_positive: 5,
            false_negative: 0,
            false_positive: 0,
            true_negative: 0,
        };
        assert_eq!(sensitivity(&perfect), Some(1.0));
        assert_eq!(specificity(&perfect), None);
    }

    #[test]
    fn roc_perfect_separation_is_one() {
        let items: Vec<(f64, bool)> = (0..50)
            .map(|i| {
                if i < 10 {
                    (0.9 + i as f64 * 0.001, true)
                } else {
                    (0.1 + i as f64 * 0.001, false)
                }
            })
            .collect();
        let curve = roc(&items).unwrap();
        assert_eq!(curve.auc, 1.0);
        let first = curve.points.first().unwrap();
        assert_eq!(
            (first.false_positive_rate, first.true_positive_rate),
            (0.0, 0.0)
        );
        let last = curve.points.last().unwrap();
        assert_eq!(
            (last.false_positive_rate, last.true_positive_rate),
            (1.0, 1.0)
        );
    }

    #[test]
    fn roc_inverted_is_zero() {
        let items: Vec<(f64, bool)> = (0..50)
            .map(|i| (i as f64, i < 10))
            .collect();
        // Positives hold the 10 lowest scores.
        let curve = roc(&items).unwrap();
        assert_eq!(curve.auc, 0.0);
    }

    #[test]
    fn roc_random_labels_near_half() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let items: Vec<(f64, bool)> = (0..10_000)
            .map(|_| (rng.gen::<f64>(), rng.gen::<bool>()))
            .collect();
        let curve = roc(&items).unwrap();
        assert!((curve.auc - 0.5).abs() < 0.05, "auc {}", curve.auc);
    }

    #[test]
    fn roc_single_class_errors() {
        let items = [(0.5, true), (0.9, true)];
        assert!(matches!(roc(&items), Err(Error::SingleClassRoc)));
    }

    /// Brute-force pairwise statistic: fraction of (positive, negative)
    /// pairs ranked correctly, half credit for ties.
    fn pairwise_auc(items: &[(f64, bool)]) -> f64 {
        let pos: Vec<f64> = items.iter().filter(|(_, l)| *l).map(|(s, _)| *s).collect();
        let neg: Vec<f64> = items.iter().filter(|(_, l)| !*l).map(|(s, _)| *s).collect();
        let mut wins = 0u64;
        let mut ties = 0u64;
        for &p in &pos {
            for &n in &neg {
                if p > n {
                    wins += 1;
                } else if p == n {
                    ties += 1;
                }
            }
        }
        (2 * wins + ties) as f64 / (2 * pos.len() as u64 * neg.len() as u64) as f64
    }

    #[test]
    fn auc_equals_pairwise_statistic_exactly() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..100 {
            let n = rng.gen_range(2..=200);
            let mut items: Vec<(f64, bool)> = (0..n)
                .map(|_| {
                    // Coarse scores force plenty of ties.
                    let s = (rng.gen::<f64>() * 8.0).round() / 8.0;
                    (s, rng.gen::<bool>())
                })
                .collect();
            if !items.iter().any(|(_, l)| *l) {
                items[0].1 = true;
            }
            if items.iter().all(|(_, l)| *l) {
                items[0].1 = false;
            }
            let curve = roc(&items).unwrap();
            assert_eq!(curve.auc, pairwise_auc(&items), "items {items:?}");
        }
    }

    proptest! {
        /// Strictly increasing transforms leave ROC points and AUC unchanged.
        #[test]
        fn monotone_transform_invariance(
            scores in proptest::collection::vec(0.0f64..1.0, 10..80),
            labels in proptest::collection::vec(any::<bool>(), 10..80),
        ) {
            let n = scores.len().min(labels.len());
            let mut items: Vec<(f64, bool)> = scores[..n]
                .iter()
                .zip(&labels[..n])
                .map(|(&s, &l)| (s, l))
                .collect();
            if !items.iter().any(|(_, l)| *l) { items[0].1 = true; }
            if items.iter().all(|(_, l)| *l) { if n > 1 { items[1].1 = false; } else { return Ok(()); } }

            let base = roc(&items).unwrap();
            let transformed: Vec<(f64, bool)> =
                items.iter().map(|&(s, l)| (s * 3.0 + 0.25, l)).collect();
            let moved = roc(&transformed).unwrap();
            prop_assert_eq!(base.auc, moved.auc);
            prop_assert_eq!(base.points.len(), moved.points.len());
            for (a, b) in base.points.iter().zip(&moved.points) {
                prop_assert_eq!(a.false_positive_rate, b.false_positive_rate);
                prop_assert_eq!(a.true_positive_rate, b.true_positive_rate);
            }
        }

        /// Every ROC point equals (1 - specificity, sensitivity) of the
        /// confusion matrix at that point's threshold.
        #[test]
        fn threshold_sweep_consistency(
            scores in proptest::collection::vec(0.0f64..1.0, 12..60),
        ) {
            let mut items: Vec<(f64, bool)> = scores
                .iter()
                .enumerate()
                .map(|(i, &s)| (s, i % 3 == 0))
                .collect();
            items[0].1 = true;
            items[1].1 = false;
            let curve = roc(&items).unwrap();
            for p in curve.points.iter().skip(1) {
                let cm = confusion(&items, p.threshold);
                let sens = sensitivity(&cm).unwrap();
                let spec = specificity(&cm).unwrap();
                prop_assert!((p.true_positive_rate - sens).abs() < 1e-12);
                prop_assert!((p.false_positive_rate - (1.0 - spec)).abs() < 1e-12);
            }

            // FPR/TPR are non-decreasing along the curve.
            for w in curve.points.windows(2) {
                prop_assert!(w[1].false_positive_rate >= w[0].false_positive_rate);
                prop_assert!(w[1].true_positive_rate >= w[0].true_positive_rate);
            }
            prop_assert!((0.0..=1.0).contains(&curve.auc));
        }
    }

    fn pred(pos: usize, score: f64, correct: bool, red: bool) -> PredictionRecord {
        PredictionRecord {
            window_position: pos,
            timestamp: crate::ingest::default_base_date(),
            predicted_index: 0,
            predicted_probability: 1.0 - score,
            actual_index: usize::from(!correct),
            actual_probability: 1.0 - score,
            correct,
            anomaly_score: score,
            is_red_team: red,
        }
    }

    #[test]
    fn evaluate_user_summary() {
        let mut records: Vec<PredictionRecord> = (0..40)
            .map(|i| pred(i, 0.1 + (i as f64) * 0.001, true, false))
            .collect();
        records.push(pred(100, 0.99, false, true));
        records.push(pred(101, 0.98, false, true));
        let (summary, curve, _) = evaluate_user("U7", &records, 0.5, 10);
        assert_eq!(summary.counts.red_team, 2);
        assert_eq!(summary.auc, Some(1.0));
        assert_eq!(summary.threat_in_top_k, Some(true));
        assert!((summary.top1_accuracy - 40.0 / 42.0).abs() < 1e-12);
        assert!(curve.is_some());

        // Single-class labels: ROC unavailable, accuracy still reported.
        let clean: Vec<PredictionRecord> =
            (0..10).map(|i| pred(i, 0.05, true, false)).collect();
        let (summary, curve, _) = evaluate_user("U8", &clean, 0.5, 10);
        assert_eq!(summary.auc, None);
        assert!(curve.is_none());
        assert_eq!(summary.threat_in_top_k, None);
        assert_eq!(summary.top1_accuracy, 1.0);
    }

    #[test]
    fn roc_csv_roundtrip() {
        let items = [(0.9, true), (0.5, false), (0.5, true), (0.1, false)];
        let curve = roc(&items).unwrap();
        let mut buf = Vec::new();
        curve.write_csv(&mut buf).unwrap();
        let points = read_roc_csv(std::io::Cursor::new(&buf)).unwrap();
        assert_eq!(points.len(), curve.points.len());
        assert_eq!(points[0].threshold, f64::INFINITY);
    }
}
