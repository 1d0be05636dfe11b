//! Threshold accuracy, average precision and ROC-AUC.

use crate::error::{Error, Result};

fn check(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::invalid("metric over zero samples"));
    }
    if scores.len() != labels.len() {
        return Err(Error::shape(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::invalid(format!("label {l} is not 0/1")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("score".into()));
    }
    Ok(())
}

/// Fraction of samples with `[score >= threshold] == label`.
pub fn accuracy(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    check(scores, labels)?;
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| u8::from(s >= threshold) == l)
        .count();
    Ok(hits as f64 / scores.len() as f64)
}

/// Ranking by descending score; ties keep index order.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// `Σ_k (R_k − R_{k−1})·P_k` over ranks holding a positive.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 {
        return Err(Error::invalid("average precision needs at least one positive"));
    }
    let mut tp = 0usize;
    let mut ap = 0.0;
    for (k, &i) in ranking(scores).iter().enumerate() {
        if labels[i] == 1 {
            tp += 1;
            ap += tp as f64 / (k + 1) as f64;
        }
    }
    Ok(ap / positives as f64)
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check(scores, labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (mut pos, mut neg) = (0usize, 0usize);
    let mut rank_sum = 0.0;
    let mut k = 0;
    while k < idx.len() {
        let mut j = k;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[k]] {
            j += 1;
        }
        let mid_rank = (k + j) as f64 / 2.0 + 1.0;
        for &i in &idx[k..=j] {
            if labels[i] == 1 {
                pos += 1;
                rank_sum += mid_rank;
            } else {
                neg += 1;
            }
        }
        k = j + 1;
    }
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("ROC-AUC needs both classes"));
    }
    Ok((rank_sum - (pos * (pos + 1)) as f64 / 2.0) / (pos * neg) as f64)
}
