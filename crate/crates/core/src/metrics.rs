//! AUC and logloss.
//!
//! AUC is the Mann-Whitney statistic: the probability that a random positive
//! scores above a random negative, with ties worth one half. The sort-based
//! version uses average ranks over tie groups, which gives exactly the same
//! value as counting pairs.

use std::cmp::Ordering;
use std::fmt;

use thiserror::Error;

use crate::model::{cross_entropy, ModelError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("AUC is undefined with {n_pos} positives and {n_neg} negatives")]
    Degenerate { n_pos: usize, n_neg: usize },
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("label {0} is not 0 or 1")]
    BadLabel(u8),
    #[error("score at position {0} is not finite")]
    NonFinite(usize),
    #[error(transparent)]
    Loss(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, MetricError>;

fn class_counts(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(MetricError::NonFinite(i));
    }
    let mut n_pos = 0;
    for &y in labels {
        match y {
            0 => {}
            1 => n_pos += 1,
            other => return Err(MetricError::BadLabel(other)),
        }
    }
    Ok((n_pos, labels.len() - n_pos))
}

/// Rank-sum AUC in O(N log N).
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (n_pos, n_neg) = class_counts(scores, labels)?;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::Degenerate { n_pos, n_neg });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));

    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j share their mean
        let avg = (i + 1 + j) as f64 / 2.0;
        let pos_in_group = order[i..j].iter().filter(|&&o| labels[o] == 1).count();
        pos_rank_sum += avg * pos_in_group as f64;
        i = j;
    }
    let np = n_pos as f64;
    Ok((pos_rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// Explicit pair count, O(n_pos * n_neg). Intended as a test oracle.
pub fn auc_bruteforce(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (n_pos, n_neg) = class_counts(scores, labels)?;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::Degenerate { n_pos, n_neg });
    }
    let mut wins = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (n_pos as f64 * n_neg as f64))
}

/// Same definition (and clamping) as the training loss.
pub fn logloss(predictions: &[f64], labels: &[u8]) -> Result<f64> {
    Ok(cross_entropy(predictions, labels)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    /// `None` when the evaluation set holds a single class.
    pub auc: Option<f64>,
    pub logloss: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl EvalResult {
    pub fn from_predictions(predictions: &[f64], labels: &[u8]) -> Result<Self> {
        let (n_pos, n_neg) = class_counts(predictions, labels)?;
        let logloss = logloss(predictions, labels)?;
        let auc = match auc(predictions, labels) {
            Ok(v) => Some(v),
            Err(MetricError::Degenerate { .. }) => None,
            Err(e) => return Err(e),
        };
        Ok(EvalResult {
            auc,
            logloss,
            n_pos,
            n_neg,
        })
    }
}

/// Formats an optional AUC the way reports print it.
pub struct AucDisplay(pub Option<f64>);

impl fmt::Display for AucDisplay {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(v) => write!(f, "{v}"),
            None => f.write_str("undefined"),
        }
    }
}
