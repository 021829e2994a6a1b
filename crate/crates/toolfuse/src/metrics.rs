//! Classification metrics: threshold accuracy and rank-based AUC.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Metric used for checkpoint selection and analyses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Accuracy,
    Auc,
}

/// Fraction of items whose thresholded prediction matches the label.
/// A score is predicted positive when it exceeds 0.5.
pub fn accuracy(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::InvalidInput("scores and labels must be nonempty and aligned".into()));
    }
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &y)| (s > 0.5) == (y == 1))
        .count();
    Ok(correct as f64 / scores.len() as f64)
}

/// Area under the ROC curve via the Mann-Whitney statistic:
/// `(concordant + 0.5 * tied) / (n_pos * n_neg)`, computed from midranks.
pub fn compute_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::InvalidInput("scores and labels must be nonempty and aligned".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidInput("scores contain NaN".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuc);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Midranks over tie groups; rank sums of half-integers are exact.
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}
