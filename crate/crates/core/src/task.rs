//! Client-side scoring of one oracle call: label-word ensemble, loss and
//! metrics over the batch.

use crate::error::{OracleError, Result};
use crate::metrics::{accuracy, cross_entropy, f1_binary};
use crate::oracle::{BatchItem, Oracle, OracleRequest};
use crate::verbalizer::{score_classes, VerbalizerSet};

#[derive(Debug, Clone, PartialEq)]
pub struct BatchEval {
    /// Mean cross-entropy over normalized ensemble scores.
    pub loss: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub predictions: Vec<usize>,
    /// Loss reported by the backend under its own label words.
    pub backend_loss: f64,
}

/// One counted oracle call, scored with `verbalizers`.
pub fn evaluate_batch(oracle: &Oracle, request: &OracleRequest, verbalizers: &VerbalizerSet) -> Result<BatchEval> {
    let response = oracle.evaluate(request)?;
    if response.probs.len() != request.batch.len() {
        return Err(OracleError::Protocol(format!(
            "{} probability vectors for a batch of {}",
            response.probs.len(),
            request.batch.len()
        ))
        .into());
    }
    score_response(&response.probs, &request.batch, verbalizers, response.loss)
}

pub fn score_response(
    probs: &[Vec<f64>],
    batch: &[BatchItem],
    verbalizers: &VerbalizerSet,
    backend_loss: f64,
) -> Result<BatchEval> {
    let mut loss = 0.0;
    let mut predictions = Vec::with_capacity(batch.len());
    for (p, item) in probs.iter().zip(batch) {
        let scores = score_classes(p, verbalizers)?.normalize();
        loss += cross_entropy(&scores, item.label)?;
        predictions.push(scores.argmax());
    }
    let labels: Vec<usize> = batch.iter().map(|b| b.label).collect();
    Ok(BatchEval {
        loss: loss / batch.len() as f64,
        accuracy: accuracy(&predictions, &labels)?,
        f1: f1_binary(&predictions, &labels)?,
        predictions,
        backend_loss,
    })
}
