//! Binary classification metrics over falsified-probability scores.
//!
//! A score at or above the threshold counts as a falsified (positive)
//! prediction.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Sample;
use crate::model::{predict_all, ModelConfig, ModelError, ModelParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("scored set is empty")]
    Empty,
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("score {0} at index {1} is outside [0, 1]")]
    ScoreOutOfRange(f64, usize),
    #[error("label {0} at index {1} is not 0 or 1")]
    InvalidLabel(u8, usize),
    #[error("metric needs both classes present")]
    SingleClass,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Scores aligned with ground-truth labels (1 = falsified).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    scores: Vec<f64>,
    labels: Vec<u8>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self, MetricsError> {
        if scores.len() != labels.len() {
            return Err(MetricsError::LengthMismatch {
                scores: scores.len(),
                labels: labels.len(),
            });
        }
        if scores.is_empty() {
            return Err(MetricsError::Empty);
        }
        for (i, &s) in scores.iter().enumerate() {
            if !(0.0..=1.0).contains(&s) {
                return Err(MetricsError::ScoreOutOfRange(s, i));
            }
        }
        for (i, &l) in labels.iter().enumerate() {
            if l > 1 {
                return Err(MetricsError::InvalidLabel(l, i));
            }
        }
        Ok(Self { scores, labels })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    fn class_counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&l| l == 1).count();
        (pos, self.labels.len() - pos)
    }
}

pub fn accuracy(set: &ScoredSet, threshold: f64) -> f64 {
    let correct = set
        .scores
        .iter()
        .zip(&set.labels)
        .filter(|(&s, &l)| (s >= threshold) == (l == 1))
        .count();
    correct as f64 / set.len() as f64
}

/// Area under the ROC curve by trapezoids over every distinct score.
/// Tied positive/negative pairs contribute one half.
pub fn roc_auc(set: &ScoredSet) -> Result<f64, MetricsError> {
    let (pos, neg) = set.class_counts();
    if pos == 0 || neg == 0 {
        return Err(MetricsError::SingleClass);
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| set.scores[b].total_cmp(&set.scores[a]));

    // Twice the area, in units of 1 / (pos * neg).
    let mut doubled: u128 = 0;
    let (mut tp, mut fp) = (0u128, 0u128);
    let mut i = 0;
    while i < order.len() {
        let s = set.scores[order[i]];
        let (prev_tp, prev_fp) = (tp, fp);
        while i < order.len() && set.scores[order[i]] == s {
            if set.labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        doubled += (fp - prev_fp) * (tp + prev_tp);
    }
    Ok(doubled as f64 / (2.0 * pos as f64 * neg as f64))
}

/// Candidate thresholds: 0, the midpoints between consecutive distinct
/// scores, and 1, ascending.
pub fn candidate_thresholds(scores: &[f64]) -> Vec<f64> {
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut out = Vec::with_capacity(sorted.len() + 1);
    out.push(0.0);
    out.extend(sorted.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    out.push(1.0);
    out
}

/// Equal error rate and the threshold that attains it.
///
/// Picks the candidate threshold minimizing `|FPR - FNR|` (lowest threshold
/// on ties) and reports `(FPR + FNR) / 2` there.
pub fn eer_and_threshold(set: &ScoredSet) -> Result<(f64, f64), MetricsError> {
    let (pos, neg) = set.class_counts();
    if pos == 0 || neg == 0 {
        return Err(MetricsError::SingleClass);
    }
    let mut items: Vec<(f64, u8)> = set.scores.iter().copied().zip(set.labels.iter().copied()).collect();
    items.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Walk thresholds upward; `below` counts items with score < threshold.
    let mut below = 0;
    let (mut fn_count, mut tn_count) = (0usize, 0usize);
    let mut best: Option<(f64, f64, f64)> = None; // (gap, eer, threshold)
    for th in candidate_thresholds(&set.scores) {
        while below < items.len() && items[below].0 < th {
            if items[below].1 == 1 {
                fn_count += 1;
            } else {
                tn_count += 1;
            }
            below += 1;
        }
        let fpr = (neg - tn_count) as f64 / neg as f64;
        let fnr = fn_count as f64 / pos as f64;
        let gap = (fpr - fnr).abs();
        if best.is_none_or(|(g, _, _)| gap < g) {
            best = Some((gap, (fpr + fnr) / 2.0, th));
        }
    }
    let (_, eer, th) = best.expect("at least two candidates");
    Ok((eer, th))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy_at_half: f64,
    pub th_eer: f64,
    pub accuracy_at_theer: f64,
    pub roc_auc: f64,
    pub eer: f64,
}

impl Metrics {
    /// Fixed-order, human-readable table.
    pub fn to_table(&self) -> String {
        format!(
            "{:<22}{:.4}\n{:<22}{:.4}\n{:<22}{:.4}\n{:<22}{:.4}\n{:<22}{:.4}\n",
            "test accuracy (0.5)",
            self.accuracy_at_half,
            "thEER",
            self.th_eer,
            "test accuracy (thEER)",
            self.accuracy_at_theer,
            "ROC AUC",
            self.roc_auc,
            "EER",
            self.eer
        )
    }
}

/// Which split the reported ROC AUC is computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AucSplit {
    #[default]
    Validation,
    Test,
}

/// Eval-mode scores for a dataset.
pub fn score_set(
    samples: &[Sample],
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<ScoredSet, MetricsError> {
    let outputs = predict_all(samples, params, config)?;
    ScoredSet::new(
        outputs.iter().map(|o| o.prediction.p_class).collect(),
        samples.iter().map(|s| s.label).collect(),
    )
}

/// Threshold and EER come from validation; accuracies from test.
pub fn evaluate(
    params: &ModelParams,
    config: &ModelConfig,
    validation: &[Sample],
    test: &[Sample],
) -> Result<Metrics, MetricsError> {
    evaluate_with(params, config, validation, test, AucSplit::Validation)
}

pub fn evaluate_with(
    params: &ModelParams,
    config: &ModelConfig,
    validation: &[Sample],
    test: &[Sample],
    auc_split: AucSplit,
) -> Result<Metrics, MetricsError> {
    let val = score_set(validation, params, config)?;
    let test = score_set(test, params, config)?;
    metrics_from_sets(&val, &test, auc_split)
}

pub fn metrics_from_sets(
    validation: &ScoredSet,
    test: &ScoredSet,
    auc_split: AucSplit,
) -> Result<Metrics, MetricsError> {
    let (eer, th_eer) = eer_and_threshold(validation)?;
    let roc_auc = match auc_split {
        AucSplit::Validation => roc_auc(validation)?,
        AucSplit::Test => roc_auc(test)?,
    };
    Ok(Metrics {
        accuracy_at_half: accuracy(test, 0.5),
        th_eer,
        accuracy_at_theer: accuracy(test, th_eer),
        roc_auc,
        eer,
    })
}
