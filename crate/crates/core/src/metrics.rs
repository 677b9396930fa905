//! Loss and evaluation metrics.

use crate::error::{check_len, invalid, Result};
use crate::verbalizer::ClassScores;

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// `-ln(score[label])` over normalized class scores.
pub fn cross_entropy(scores: &ClassScores, label: usize) -> Result<f64> {
    if !scores.is_normalized() {
        return Err(invalid("cross-entropy needs normalized class scores"));
    }
    let p = *scores
        .probs()
        .get(label)
        .ok_or_else(|| invalid(format!("label {label} out of range for {} classes", scores.len())))?;
    if p < PROB_FLOOR {
        log::warn!("class probability {p:e} clamped to {PROB_FLOOR:e}");
    }
    Ok(-p.max(PROB_FLOOR).ln())
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    check_len("accuracy inputs", labels.len(), predictions.len())?;
    if labels.is_empty() {
        return Err(invalid("accuracy of an empty set is undefined"));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Binary F1 with class 1 as the positive class; 0 when `P + R = 0`.
pub fn f1_binary(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    check_len("f1 inputs", labels.len(), predictions.len())?;
    if labels.is_empty() {
        return Err(invalid("F1 of an empty set is undefined"));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p == 1, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    if precision + recall == 0.0 {
        Ok(0.0)
    } else {
        Ok(2.0 * precision * recall / (precision + recall))
    }
}
