//! ROC AUC and evaluation reports.

use std::cmp::Ordering;

use crate::error::{Result, VelcError};

/// Area under the ROC curve for `scores` against binary `labels`
/// (1 = anomalous, the positive class).
///
/// Computed from average ranks, so tied scores earn half credit per pair.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(VelcError::Shape {
            op: "auc",
            left: vec![scores.len()],
            right: vec![labels.len()],
        });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(VelcError::Domain {
            op: "auc",
            detail: format!("score {i} is {}", scores[i]),
        });
    }
    if let Some(&l) = labels.iter().find(|&&l| l > 1) {
        return Err(VelcError::Domain {
            op: "auc",
            detail: format!("label {l} is not 0 or 1"),
        });
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(VelcError::SingleClass(format!(
            "auc needs both classes, got {n_neg} normal and {n_pos} anomalous"
        )));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));

    // Sum of 1-based average ranks over the positives, doubled to stay in
    // integers until the end.
    let mut pos_rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j share the average (i + 1 + j) / 2.
        let avg2 = (i + 1 + j) as u128;
        let pos_in_group = order[i..j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        pos_rank_sum2 += avg2 * pos_in_group;
        i = j;
    }
    let n_pos = n_pos as u128;
    let u2 = pos_rank_sum2 - n_pos * (n_pos + 1);
    Ok(u2 as f64 / (2.0 * (n_pos as f64) * (n_neg as f64)))
}

/// Summary of one evaluated score file.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub dataset: String,
    pub auc: f64,
    pub n_normal: usize,
    pub n_anomalous: usize,
    pub score_min: f64,
    pub score_mean: f64,
    pub score_max: f64,
}

impl EvalReport {
    pub const HEADER: &'static str =
        "dataset\tauc\tn_normal\tn_anomalous\tscore_min\tscore_mean\tscore_max";

    pub fn new(dataset: &str, scores: &[f64], labels: &[u8]) -> Result<Self> {
        let auc = auc(scores, labels)?;
        let n_anomalous = labels.iter().filter(|&&l| l == 1).count();
        let n = scores.len() as f64;
        Ok(EvalReport {
            dataset: dataset.to_string(),
            auc,
            n_normal: labels.len() - n_anomalous,
            n_anomalous,
            score_min: scores.iter().copied().fold(f64::INFINITY, f64::min),
            score_mean: scores.iter().sum::<f64>() / n,
            score_max: scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }

    /// One tab-separated row matching [`EvalReport::HEADER`].
    pub fn to_row(&self) -> String {
        format!(
            "{}\t{:.6}\t{}\t{}\t{:.6e}\t{:.6e}\t{:.6e}",
            self.dataset,
            self.auc,
            self.n_normal,
            self.n_anomalous,
            self.score_min,
            self.score_mean,
            self.score_max
        )
    }
}
