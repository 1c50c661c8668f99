//! Evaluation metrics: accuracy, macro F1, one-vs-rest macro ROC AUC, with
//! optional per-group breakdowns.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::records::{MedicationStatus, STATUS_COUNT};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// One-vs-rest ROC AUC; undefined when the class has no positives or no
    /// negatives in the evaluation set.
    pub auc: Option<f64>,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub accuracy: f64,
    /// Unweighted mean of the three per-class F1 scores.
    pub f1_macro: f64,
    /// Mean over classes with a defined ROC; `None` when no class has one.
    pub auc_macro: Option<f64>,
    pub per_class: [ClassMetrics; STATUS_COUNT],
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub groups: BTreeMap<String, Metrics>,
}

/// One scored sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub probs: [f64; STATUS_COUNT],
    pub label: MedicationStatus,
}

impl Prediction {
    /// Argmax class, lowest index on ties.
    pub fn predicted(&self) -> usize {
        let mut best = 0;
        for c in 1..STATUS_COUNT {
            if self.probs[c] > self.probs[best] {
                best = c;
            }
        }
        best
    }
}

/// ROC AUC by threshold sweep with trapezoidal integration; tied scores are
/// grouped so the result equals the Mann-Whitney pairwise statistic with
/// ties counted as one half. `None` when either class is empty.
pub fn roc_auc(scores: &[f64], is_positive: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), is_positive.len());
    let pos = is_positive.iter().filter(|&&p| p).count();
    let neg = is_positive.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));

    let mut auc = 0.0;
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_tp, mut prev_fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        // Consume the whole tie group at this score.
        let score = scores[order[i]];
        while i < order.len() && scores[order[i]] == score {
            if is_positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        // Trapezoid between the previous and current ROC points.
        auc += (fp - prev_fp) as f64 * (tp + prev_tp) as f64 / 2.0;
        prev_tp = tp;
        prev_fp = fp;
    }
    Some(auc / (pos as f64 * neg as f64))
}

pub fn compute_metrics(predictions: &[Prediction]) -> Metrics {
    let n = predictions.len();
    let mut confusion = [[0usize; STATUS_COUNT]; STATUS_COUNT]; // [true][pred]
    for p in predictions {
        confusion[p.label.index()][p.predicted()] += 1;
    }
    let correct: usize = (0..STATUS_COUNT).map(|c| confusion[c][c]).sum();
    let accuracy = if n == 0 { 0.0 } else { correct as f64 / n as f64 };

    let per_class: [ClassMetrics; STATUS_COUNT] = core::array::from_fn(|c| {
        let tp = confusion[c][c];
        let predicted: usize = (0..STATUS_COUNT).map(|t| confusion[t][c]).sum();
        let actual: usize = confusion[c].iter().sum();
        let precision = if predicted == 0 {
            0.0
        } else {
            tp as f64 / predicted as f64
        };
        let recall = if actual == 0 {
            0.0
        } else {
            tp as f64 / actual as f64
        };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        let scores: Vec<f64> = predictions.iter().map(|p| p.probs[c]).collect();
        let is_pos: Vec<bool> = predictions.iter().map(|p| p.label.index() == c).collect();
        ClassMetrics {
            precision,
            recall,
            f1,
            auc: roc_auc(&scores, &is_pos),
            support: actual,
        }
    });

    let f1_macro = per_class.iter().map(|c| c.f1).sum::<f64>() / STATUS_COUNT as f64;
    let defined: Vec<f64> = per_class.iter().filter_map(|c| c.auc).collect();
    let auc_macro = if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };

    Metrics {
        n,
        accuracy,
        f1_macro,
        auc_macro,
        per_class,
        groups: BTreeMap::new(),
    }
}

/// Metrics over all samples plus a per-group breakdown.
pub fn compute_grouped_metrics(predictions: &[(String, Prediction)]) -> Metrics {
    let all: Vec<Prediction> = predictions.iter().map(|(_, p)| *p).collect();
    let mut metrics = compute_metrics(&all);
    let mut by_group: BTreeMap<String, Vec<Prediction>> = BTreeMap::new();
    for (g, p) in predictions {
        by_group.entry(g.clone()).or_default().push(*p);
    }
    for (g, preds) in by_group {
        metrics.groups.insert(g, compute_metrics(&preds));
    }
    metrics
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use MedicationStatus::*;

    fn pred(p: [f64; 3], label: MedicationStatus) -> Prediction {
        Prediction { probs: p, label }
    }

    /// Exhaustive pairwise-concordance oracle, O(P·N).
    fn pairwise_auc(scores: &[f64], is_pos: &[bool]) -> Option<f64> {
        let mut concordant = 0.0;
        let mut pairs = 0.0;
        for i in 0..scores.len() {
            if !is_pos[i] {
                continue;
            }
            for j in 0..scores.len() {
                if is_pos[j] {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    concordant += 1.0;
                } else if scores[i] == scores[j] {
                    concordant += 0.5;
                }
            }
        }
        if pairs == 0.0 {
            None
        } else {
            Some(concordant / pairs)
        }
    }

    #[test]
    fn perfect_predictor_scores_one() {
        let preds: Vec<Prediction> = (0..30)
            .map(|i| {
                let label = MedicationStatus::from_index(i % 3).unwrap();
                let mut p = [0.0; 3];
                p[label.index()] = 1.0;
                pred(p, label)
            })
            .collect();
        let m = compute_metrics(&preds);
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.f1_macro, 1.0);
        assert_eq!(m.auc_macro, Some(1.0));
    }

    #[test]
    fn random_scores_near_half_auc() {
        let mut rng = Rng::seed_from(123);
        let preds: Vec<Prediction> = (0..2000)
            .map(|_| {
                let label = MedicationStatus::from_index(rng.below(3)).unwrap();
                pred(
                    [rng.next_f64(), rng.next_f64(), rng.next_f64()],
                    label,
                )
            })
            .collect();
        let m = compute_metrics(&preds);
        let auc = m.auc_macro.unwrap();
        assert!((0.45..=0.55).contains(&auc), "auc {auc}");
    }

    #[test]
    fn four_sample_table_matches_pairwise_oracle_exactly() {
        // Hand-built score tables, including a tie.
        let tables: [(&[f64], &[bool]); 3] = [
            (&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]),
            (&[0.9, 0.4, 0.9, 0.2], &[true, false, false, true]),
            (&[0.5, 0.5, 0.5, 0.5], &[true, false, true, false]),
        ];
        for (scores, is_pos) in tables {
            let got = roc_auc(scores, is_pos);
            let want = pairwise_auc(scores, is_pos);
            assert_eq!(got, want, "scores {scores:?}");
        }
        // The classic 4-sample table has AUC exactly 0.75.
        assert_eq!(
            roc_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]),
            Some(0.75)
        );
    }

    #[test]
    fn auc_matches_pairwise_oracle_on_random_tables() {
        let mut rng = Rng::seed_from(7);
        for _ in 0..200 {
            let n = 2 + rng.below(12);
            // Coarse scores force plenty of ties.
            let scores: Vec<f64> = (0..n).map(|_| (rng.below(5) as f64) / 4.0).collect();
            let is_pos: Vec<bool> = (0..n).map(|_| rng.below(2) == 1).collect();
            assert_eq!(roc_auc(&scores, &is_pos), pairwise_auc(&scores, &is_pos));
        }
    }

    #[test]
    fn auc_invariant_under_monotone_transform() {
        let mut rng = Rng::seed_from(9);
        let scores: Vec<f64> = (0..50).map(|_| rng.next_f64()).collect();
        let is_pos: Vec<bool> = (0..50).map(|_| rng.below(2) == 1).collect();
        let base = roc_auc(&scores, &is_pos).unwrap();
        let squashed: Vec<f64> = scores.iter().map(|&s| 1.0 / (1.0 + libm::exp(-7.0 * s))).collect();
        let shifted: Vec<f64> = scores.iter().map(|&s| 3.0 * s + 11.0).collect();
        assert!((roc_auc(&squashed, &is_pos).unwrap() - base).abs() < 1e-12);
        assert!((roc_auc(&shifted, &is_pos).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn undefined_class_excluded_from_macro() {
        // No AfterMedication samples at all: its ROC is undefined and the
        // macro mean is over the two defined classes.
        let preds = [
            pred([0.9, 0.1, 0.0], AnotherTime),
            pred([0.2, 0.8, 0.0], BeforeMedication),
            pred([0.7, 0.3, 0.0], AnotherTime),
        ];
        let m = compute_metrics(&preds);
        assert!(m.per_class[2].auc.is_none());
        assert!(m.per_class[0].auc.is_some());
        let mean = (m.per_class[0].auc.unwrap() + m.per_class[1].auc.unwrap()) / 2.0;
        assert_eq!(m.auc_macro, Some(mean));
    }

    #[test]
    fn grouped_metrics_partition_samples() {
        let rows = [
            (String::from("g1"), pred([0.9, 0.05, 0.05], AnotherTime)),
            (String::from("g1"), pred([0.2, 0.7, 0.1], BeforeMedication)),
            (String::from("g2"), pred([0.1, 0.2, 0.7], AnotherTime)),
        ];
        let m = compute_grouped_metrics(&rows);
        assert_eq!(m.n, 3);
        assert_eq!(m.groups.len(), 2);
        assert_eq!(m.groups["g1"].n, 2);
        assert_eq!(m.groups["g2"].n, 1);
        assert_eq!(m.groups["g1"].accuracy, 1.0);
        assert_eq!(m.groups["g2"].accuracy, 0.0);
    }
}
