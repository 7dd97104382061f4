//! Classification metrics (macro F1, accuracy, one-vs-rest AUROC, average
//! precision) and feature-recovery scoring.
//!
//! A metric that is undefined for the given data (no classes with both
//! positives and negatives, empty input) is NaN. In serialized records NaN is
//! written as `null` and the metric name is listed under `undefined`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

/// Macro-averaged F1 over every class that occurs in `truth` or `pred`.
pub fn f1_macro(pred: &[usize], truth: &[usize], num_classes: usize) -> f64 {
    assert_eq!(
        pred.len(),
        truth.len(),
        "prediction / label length mismatch"
    );
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fn_ = vec![0usize; num_classes];
    let mut present = BTreeSet::new();
    for (&p, &t) in pred.iter().zip(truth) {
        present.insert(p);
        present.insert(t);
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    if present.is_empty() {
        return f64::NAN;
    }
    let total: f64 = present
        .iter()
        .map(|&c| {
            let precision = ratio(tp[c], tp[c] + fp[c]);
            let recall = ratio(tp[c], tp[c] + fn_[c]);
            if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            }
        })
        .sum();
    total / present.len() as f64
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(
        pred.len(),
        truth.len(),
        "prediction / label length mismatch"
    );
    if pred.is_empty() {
        return f64::NAN;
    }
    pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / pred.len() as f64
}

/// 1-based ranks with ties sharing their average rank.
fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Mann-Whitney AUROC of `scores` for the positives flagged in `positive`.
/// NaN when either side is empty.
pub fn binary_auroc(scores: &[f64], positive: &[bool]) -> f64 {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return f64::NAN;
    }
    let ranks = midranks(scores);
    let rank_sum: f64 = ranks
        .iter()
        .zip(positive)
        .filter(|(_, &p)| p)
        .map(|(r, _)| r)
        .sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    u / (n_pos as f64 * n_neg as f64)
}

/// Step-wise average precision over the descending-score sweep; tied scores
/// form a single threshold. NaN without positives.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> f64 {
    let n_pos = positive.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return f64::NAN;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut prev_recall, mut ap) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            seen += 1;
            if positive[order[i]] {
                tp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / seen as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

fn column(scores: &[Vec<f64>], c: usize) -> Vec<f64> {
    scores.iter().map(|row| row[c]).collect()
}

fn classes_in(truth: &[usize]) -> BTreeSet<usize> {
    truth.iter().copied().collect()
}

fn mean_defined(values: impl Iterator<Item = f64>) -> f64 {
    let defined: Vec<f64> = values.filter(|v| !v.is_nan()).collect();
    if defined.is_empty() {
        f64::NAN
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    }
}

/// One-vs-rest AUROC macro-averaged over the classes present in `truth`.
/// `scores[i][c]` is the score of class `c` for sample `i`.
pub fn auroc_macro_ovr(scores: &[Vec<f64>], truth: &[usize]) -> f64 {
    assert_eq!(scores.len(), truth.len(), "score / label length mismatch");
    mean_defined(classes_in(truth).into_iter().map(|c| {
        let pos: Vec<bool> = truth.iter().map(|&t| t == c).collect();
        binary_auroc(&column(scores, c), &pos)
    }))
}

/// Average precision macro-averaged over the classes present in `truth`.
pub fn auprc_macro(scores: &[Vec<f64>], truth: &[usize]) -> f64 {
    assert_eq!(scores.len(), truth.len(), "score / label length mismatch");
    mean_defined(classes_in(truth).into_iter().map(|c| {
        let pos: Vec<bool> = truth.iter().map(|&t| t == c).collect();
        average_precision(&column(scores, c), &pos)
    }))
}

/// Precision and recall of a selected feature set against the true one.
pub fn selection_recovery(selected: &[usize], truth: &[usize]) -> (f64, f64) {
    let sel: BTreeSet<usize> = selected.iter().copied().collect();
    let tru: BTreeSet<usize> = truth.iter().copied().collect();
    let hit = sel.intersection(&tru).count() as f64;
    let precision = if sel.is_empty() {
        f64::NAN
    } else {
        hit / sel.len() as f64
    };
    let recall = if tru.is_empty() {
        f64::NAN
    } else {
        hit / tru.len() as f64
    };
    (precision, recall)
}

mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_nan() {
            s.serialize_none()
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskScores {
    Classification {
        #[serde(with = "nan_as_null")]
        f1_macro: f64,
        #[serde(with = "nan_as_null")]
        accuracy: f64,
        #[serde(with = "nan_as_null")]
        auroc_macro_ovr: f64,
        #[serde(with = "nan_as_null")]
        auprc_macro: f64,
    },
    Regression {
        #[serde(with = "nan_as_null")]
        mse: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: String,
    pub n_evaluated: usize,
    #[serde(flatten)]
    pub scores: TaskScores,
    /// Names of metrics that are undefined (NaN) on this split.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub undefined: Vec<String>,
}

impl TaskMetrics {
    pub fn classification(
        task: &str,
        probs: &[Vec<f64>],
        truth: &[usize],
        num_classes: usize,
    ) -> Self {
        let pred: Vec<usize> = probs
            .iter()
            .map(|row| crate::selection::top_k_indices(row, 1)[0])
            .collect();
        let scores = TaskScores::Classification {
            f1_macro: f1_macro(&pred, truth, num_classes),
            accuracy: accuracy(&pred, truth),
            auroc_macro_ovr: auroc_macro_ovr(probs, truth),
            auprc_macro: auprc_macro(probs, truth),
        };
        TaskMetrics::with_flags(task, truth.len(), scores)
    }

    pub fn regression(task: &str, pred: &[f64], truth: &[f64]) -> Self {
        let mse = if truth.is_empty() {
            f64::NAN
        } else {
            pred.iter()
                .zip(truth)
                .map(|(p, t)| (p - t) * (p - t))
                .sum::<f64>()
                / truth.len() as f64
        };
        TaskMetrics::with_flags(task, truth.len(), TaskScores::Regression { mse })
    }

    fn with_flags(task: &str, n: usize, scores: TaskScores) -> Self {
        let undefined = scores
            .named()
            .into_iter()
            .filter(|(_, v)| v.is_nan())
            .map(|(k, _)| k.to_owned())
            .collect();
        TaskMetrics {
            task: task.to_owned(),
            n_evaluated: n,
            scores,
            undefined,
        }
    }
}

impl TaskScores {
    /// `(name, value)` pairs in a fixed order.
    pub fn named(&self) -> Vec<(&'static str, f64)> {
        match *self {
            TaskScores::Classification {
                f1_macro,
                accuracy,
                auroc_macro_ovr,
                auprc_macro,
            } => vec![
                ("f1_macro", f1_macro),
                ("accuracy", accuracy),
                ("auroc_macro_ovr", auroc_macro_ovr),
                ("auprc_macro", auprc_macro),
            ],
            TaskScores::Regression { mse } => vec![("mse", mse)],
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.named()
            .into_iter()
            .find(|(k, _)| *k == name)
            .map(|(_, v)| v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecovery {
    #[serde(with = "nan_as_null")]
    pub precision: f64,
    #[serde(with = "nan_as_null")]
    pub recall: f64,
}

/// Metrics of one evaluation: per task, plus feature recovery when the true
/// informative set is known.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub tasks: Vec<TaskMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<SelectionRecovery>,
}

impl MetricRecord {
    pub fn task(&self, name: &str) -> Option<&TaskMetrics> {
        self.tasks.iter().find(|t| t.task == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn f1_examples() {
        assert_eq!(f1_macro(&[0, 1, 2, 1], &[0, 1, 2, 1], 3), 1.0);
        assert!((f1_macro(&[0, 0, 1, 1], &[0, 1, 0, 1], 2) - 0.5).abs() < 1e-15);
        assert!((f1_macro(&[0, 0, 0, 0], &[0, 0, 1, 1], 2) - 1.0 / 3.0).abs() < 1e-15);
        // class 2 never occurs: excluded
        assert_eq!(f1_macro(&[0, 1], &[0, 1], 3), 1.0);
        assert!(f1_macro(&[], &[], 2).is_nan());
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0, 1, 2], &[0, 1, 2]), 1.0);
        assert_eq!(accuracy(&[1, 0], &[0, 1]), 0.0);
        assert_eq!(accuracy(&[0, 1, 1, 0], &[0, 1, 1, 1]), 0.75);
    }

    fn binary_probs(p: &[f64]) -> Vec<Vec<f64>> {
        p.iter().map(|&v| vec![1.0 - v, v]).collect()
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(
            auroc_macro_ovr(&binary_probs(&[0.1, 0.2, 0.8, 0.9]), &[0, 0, 1, 1]),
            1.0
        );
        assert_eq!(
            auroc_macro_ovr(&binary_probs(&[0.5; 4]), &[0, 1, 0, 1]),
            0.5
        );
        assert!(
            (auroc_macro_ovr(&binary_probs(&[0.1, 0.4, 0.35, 0.8]), &[0, 0, 1, 1]) - 0.75).abs()
                < 1e-12
        );
        assert!(auroc_macro_ovr(&binary_probs(&[0.1, 0.4]), &[1, 1]).is_nan());
    }

    #[test]
    fn auprc_examples() {
        assert_eq!(
            auprc_macro(&binary_probs(&[0.1, 0.2, 0.8, 0.9]), &[0, 0, 1, 1]),
            1.0
        );
        // descending: 0.8(+) 0.4(-) 0.35(+) 0.1(-) -> AP(class 1) = 0.5*1 + 0.5*2/3
        let ap1 = average_precision(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]);
        assert!((ap1 - (0.5 + 1.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn auprc_of_random_scores_is_near_prevalence() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 200;
        let positive: Vec<bool> = (0..n).map(|i| i % 4 == 0).collect();
        let trials = 10_000;
        let mean = (0..trials)
            .map(|_| {
                let s: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
                average_precision(&s, &positive)
            })
            .sum::<f64>()
            / trials as f64;
        assert!((mean - 0.25).abs() < 0.02, "{mean}");
    }

    #[test]
    fn selection_recovery_examples() {
        assert_eq!(selection_recovery(&[1, 2, 3], &[3, 2, 1]), (1.0, 1.0));
        assert_eq!(selection_recovery(&[1, 2], &[3, 4]), (0.0, 0.0));
        assert_eq!(
            selection_recovery(&[0, 1, 2, 9], &[0, 1, 2, 3, 4, 5]),
            (0.75, 0.5)
        );
    }

    #[test]
    fn undefined_metrics_are_flagged_and_serialize_as_null() {
        let m = TaskMetrics::classification("t", &binary_probs(&[0.3, 0.6]), &[1, 1], 2);
        assert_eq!(m.undefined, vec!["auroc_macro_ovr".to_string()]);
        let json = serde_json::to_string(&m).unwrap();
        assert!(json.contains("\"auroc_macro_ovr\":null"), "{json}");
        let back: TaskMetrics = serde_json::from_str(&json).unwrap();
        assert!(back.scores.get("auroc_macro_ovr").unwrap().is_nan());
    }

    #[test]
    fn auroc_is_invariant_to_monotone_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let n = rng.gen_range(4..40);
            let truth: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
            let scores: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let warped: Vec<Vec<f64>> = scores
                .iter()
                .map(|r| r.iter().map(|v| (3.0 * v).exp() + 1.0).collect())
                .collect();
            let (a, b) = (
                auroc_macro_ovr(&scores, &truth),
                auroc_macro_ovr(&warped, &truth),
            );
            assert!(a.is_nan() && b.is_nan() || (a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn macro_metrics_are_invariant_to_consistent_label_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let perm = [2usize, 0, 3, 1];
        for _ in 0..50 {
            let n = rng.gen_range(4..40);
            let truth: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
            let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
            let scores: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..4).map(|_| rng.gen()).collect())
                .collect();
            let pt: Vec<usize> = truth.iter().map(|&c| perm[c]).collect();
            let pp: Vec<usize> = pred.iter().map(|&c| perm[c]).collect();
            let ps: Vec<Vec<f64>> = scores
                .iter()
                .map(|r| {
                    let mut o = vec![0.0; 4];
                    for c in 0..4 {
                        o[perm[c]] = r[c];
                    }
                    o
                })
                .collect();
            assert!((f1_macro(&pred, &truth, 4) - f1_macro(&pp, &pt, 4)).abs() < 1e-12);
            assert!((auprc_macro(&scores, &truth) - auprc_macro(&ps, &pt)).abs() < 1e-12);
        }
    }
}
