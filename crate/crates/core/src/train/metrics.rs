use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("{truth} labels but {scores} score rows")]
    LengthMismatch { truth: usize, scores: usize },
    #[error("no samples to evaluate")]
    Empty,
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("score row {row} sums to {sum}, not 1")]
    NotProbabilities { row: usize, sum: f64 },
    #[error("ROC-AUC is undefined when the truth contains a single class")]
    UndefinedAuc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Percent correct by argmax.
    pub accuracy: f64,
    /// Binary problems only.
    pub roc_auc: Option<f64>,
    pub macro_f1: f64,
    /// `confusion[truth][predicted]`
    pub confusion: Vec<Vec<usize>>,
}

/// Area under the ROC curve: the probability that a random positive scores
/// above a random negative, ties counting one half. Computed exactly from
/// sorted scores as `(2 * wins + ties) / (2 * P * N)`.
pub fn roc_auc(truth: &[bool], scores: &[f64]) -> Result<f64, MetricError> {
    if truth.len() != scores.len() {
        return Err(MetricError::LengthMismatch { truth: truth.len(), scores: scores.len() });
    }
    let mut pairs: Vec<(f64, bool)> = scores.iter().copied().zip(truth.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (mut neg_below, mut twice_u) = (0u64, 0u64);
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        while j < pairs.len() && pairs[j].0 == pairs[i].0 {
            j += 1;
        }
        let pos = pairs[i..j].iter().filter(|p| p.1).count() as u64;
        let neg = (j - i) as u64 - pos;
        twice_u += pos * (2 * neg_below + neg);
        neg_below += neg;
        i = j;
    }
    let p = truth.iter().filter(|&&t| t).count() as u64;
    let n = truth.len() as u64 - p;
    if p == 0 || n == 0 {
        return Err(MetricError::UndefinedAuc);
    }
    Ok(twice_u as f64 / (2 * p * n) as f64)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Accuracy, ROC-AUC (two classes only; positive class 1), macro-F1 and the
/// confusion matrix. `probs` is row-major `truth.len() x classes`.
pub fn compute_metrics(truth: &[usize], probs: &[f64], classes: usize) -> Result<Metrics, MetricError> {
    if truth.is_empty() {
        return Err(MetricError::Empty);
    }
    if probs.len() != truth.len() * classes {
        return Err(MetricError::LengthMismatch { truth: truth.len(), scores: probs.len() / classes.max(1) });
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (r, (&t, row)) in truth.iter().zip(probs.chunks_exact(classes)).enumerate() {
        if t >= classes {
            return Err(MetricError::Label { label: t, classes });
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(MetricError::NotProbabilities { row: r, sum });
        }
        confusion[t][argmax(row)] += 1;
    }
    let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
    let accuracy = 100.0 * correct as f64 / truth.len() as f64;
    let macro_f1 = (0..classes)
        .map(|c| {
            let tp = confusion[c][c];
            let fn_: usize = confusion[c].iter().sum::<usize>() - tp;
            let fp: usize = (0..classes).map(|t| confusion[t][c]).sum::<usize>() - tp;
            let denom = 2 * tp + fp + fn_;
            if denom == 0 {
                0.0
            } else {
                2.0 * tp as f64 / denom as f64
            }
        })
        .sum::<f64>()
        / classes as f64;
    let roc_auc = if classes == 2 {
        let pos: Vec<bool> = truth.iter().map(|&t| t == 1).collect();
        let scores: Vec<f64> = probs.chunks_exact(2).map(|r| r[1]).collect();
        Some(roc_auc(&pos, &scores)?)
    } else {
        None
    };
    Ok(Metrics { accuracy, roc_auc, macro_f1, confusion })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Population standard deviation (divide by the fold count).
    pub std: f64,
}

pub fn aggregate_folds(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some(Summary { mean, std: var.sqrt() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binary_probs(p1: &[f64]) -> Vec<f64> {
        p1.iter().flat_map(|&p| [1.0 - p, p]).collect()
    }

    #[test]
    fn perfect_separation() {
        let m = compute_metrics(&[1, 1, 0, 0], &binary_probs(&[0.9, 0.8, 0.1, 0.2]), 2).unwrap();
        assert_eq!(m.roc_auc, Some(1.0));
        assert_eq!(m.accuracy, 100.0);
        assert_eq!(m.confusion, vec![vec![2, 0], vec![0, 2]]);
    }

    #[test]
    fn ties_count_half() {
        // pairs: (0.6,0.5) win, (0.6,0.4) win, (0.4,0.5) loss, (0.4,0.4) tie
        let auc = roc_auc(&[true, true, false, false], &[0.6, 0.4, 0.5, 0.4]).unwrap();
        assert_eq!(auc, 2.5 / 4.0);
    }

    #[test]
    fn constant_predictor_macro_f1() {
        let truth = [0, 1, 2, 3];
        let probs: Vec<f64> = (0..4).flat_map(|_| [1.0, 0.0, 0.0, 0.0]).collect();
        let m = compute_metrics(&truth, &probs, 4).unwrap();
        assert!((m.macro_f1 - 0.1).abs() < 1e-12);
        assert_eq!(m.accuracy, 25.0);
        assert_eq!(m.roc_auc, None);
    }

    #[test]
    fn argmax_ties_pick_lower_class() {
        let m = compute_metrics(&[1], &[0.5, 0.5], 2);
        assert_eq!(m.unwrap_err(), MetricError::UndefinedAuc);
        let m = compute_metrics(&[1, 0], &[0.5, 0.5, 0.5, 0.5], 2).unwrap();
        assert_eq!(m.confusion, vec![vec![1, 0], vec![1, 0]]);
    }

    #[test]
    fn rejects_unnormalized_rows() {
        assert!(matches!(compute_metrics(&[0, 1], &[0.5, 0.6, 0.5, 0.5], 2), Err(MetricError::NotProbabilities { row: 0, .. })));
    }

    #[test]
    fn single_fold_aggregate() {
        assert_eq!(aggregate_folds(&[50.0]), Some(Summary { mean: 50.0, std: 0.0 }));
        assert_eq!(aggregate_folds(&[]), None);
    }
}
