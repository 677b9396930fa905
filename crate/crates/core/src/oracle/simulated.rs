//! Deterministic stand-in for a frozen masked language model.
//!
//! The input representation is the mean token embedding `h0`; each layer
//! computes `h_l = tanh(W_l·h_{l-1} + U_l·p_l)`, so every layer's prompt
//! shifts that layer's operating point. The output head is tied to the
//! embedding table: mask-position probabilities are `softmax(E·h_L)`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Backend, BatchItem, ModelInfo, OracleRequest, OracleResponse};
use crate::corpus::TokenId;
use crate::error::{invalid, OracleError, Result};
use crate::metrics::cross_entropy;
use crate::subspace::sample_std;
use crate::verbalizer::{score_classes, VerbalizerSet};

/// Frozen weights of the simulated model.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedModelSpec {
    /// `V×D`, shared by the input embedding and the output head.
    embeddings: DMatrix<f64>,
    /// Per-layer `D×D` hidden transforms `W_l`.
    hidden: Vec<DMatrix<f64>>,
    /// Per-layer `D×D` prompt-injection transforms `U_l`.
    inject: Vec<DMatrix<f64>>,
}

impl SimulatedModelSpec {
    pub fn from_parts(embeddings: DMatrix<f64>, hidden: Vec<DMatrix<f64>>, inject: Vec<DMatrix<f64>>) -> Result<Self> {
        let d = embeddings.ncols();
        if embeddings.nrows() == 0 || d == 0 {
            return Err(invalid("embedding table must be non-empty"));
        }
        if hidden.is_empty() || hidden.len() != inject.len() {
            return Err(invalid(format!(
                "need one hidden and one injection transform per layer, got {} and {}",
                hidden.len(),
                inject.len()
            )));
        }
        if hidden.iter().chain(&inject).any(|m| m.shape() != (d, d)) {
            return Err(invalid(format!("layer transforms must be {d}x{d}")));
        }
        Ok(Self {
            embeddings,
            hidden,
            inject,
        })
    }

    /// Gaussian weights: embeddings with std `embedding_std`, `W_l` with
    /// entries of std `hidden_gain / √D`, and `U_l = inject_gain · I`.
    pub fn random(
        layers: usize,
        prompt_dim: usize,
        vocab_size: usize,
        embedding_std: f64,
        hidden_gain: f64,
        inject_gain: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |scale: f64| -> f64 {
            let n: f64 = StandardNormal.sample(&mut rng);
            n * scale
        };
        let embeddings = DMatrix::from_fn(vocab_size, prompt_dim, |_, _| normal(embedding_std));
        let w_scale = hidden_gain / (prompt_dim as f64).sqrt();
        let hidden = (0..layers)
            .map(|_| DMatrix::from_fn(prompt_dim, prompt_dim, |_, _| normal(w_scale)))
            .collect();
        let inject = (0..layers)
            .map(|_| DMatrix::identity(prompt_dim, prompt_dim) * inject_gain)
            .collect();
        Self::from_parts(embeddings, hidden, inject)
    }

    pub fn layers(&self) -> usize {
        self.hidden.len()
    }

    pub fn prompt_dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn vocab_size(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn embeddings(&self) -> &DMatrix<f64> {
        &self.embeddings
    }

    pub fn embedding(&self, token: TokenId) -> Option<Vec<f64>> {
        let t = token as usize;
        (t < self.vocab_size()).then(|| self.embeddings.row(t).iter().copied().collect())
    }

    /// Sample standard deviation over every entry of the embedding table.
    pub fn embedding_std(&self) -> f64 {
        sample_std(self.embeddings.iter().copied())
    }

    /// Mask-position vocabulary distributions for a well-formed batch.
    pub fn forward_probs(&self, prompts: &[Vec<f64>], batch: &[BatchItem]) -> Vec<Vec<f64>> {
        let d = self.prompt_dim();
        let mut h = DMatrix::zeros(d, batch.len());
        for (j, item) in batch.iter().enumerate() {
            let mut col = h.column_mut(j);
            for &t in &item.tokens {
                col += self.embeddings.row(t as usize).transpose();
            }
            col /= item.tokens.len() as f64;
        }
        for ((w, u), p) in self.hidden.iter().zip(&self.inject).zip(prompts) {
            let bias = u * DVector::from_column_slice(p);
            let mut pre = w * &h;
            for mut col in pre.column_iter_mut() {
                col += &bias;
            }
            h = pre.map(f64::tanh);
        }
        let logits = &self.embeddings * h;
        logits.column_iter().map(|c| softmax(c.iter().copied())).collect()
    }
}

fn softmax(logits: impl Iterator<Item = f64> + Clone) -> Vec<f64> {
    let max = logits.clone().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.map(|v| (v - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|v| v / total).collect()
}

/// Pure forward pass plus backend-side loss under `reference` label words.
pub fn simulate_forward(
    spec: &SimulatedModelSpec,
    reference: &VerbalizerSet,
    request: &OracleRequest,
) -> Result<OracleResponse, OracleError> {
    let info = ModelInfo {
        layers: spec.layers(),
        prompt_dim: spec.prompt_dim(),
        vocab_size: spec.vocab_size(),
        num_classes: reference.num_classes(),
    };
    request.validate(&info)?;
    let probs = spec.forward_probs(&request.prompts, &request.batch);
    let mut loss = 0.0;
    for (p, item) in probs.iter().zip(&request.batch) {
        let scores = score_classes(p, reference)
            .map_err(|e| OracleError::Rejected(e.to_string()))?
            .normalize();
        loss += cross_entropy(&scores, item.label).map_err(|e| OracleError::Rejected(e.to_string()))?;
    }
    Ok(OracleResponse {
        probs,
        loss: loss / request.batch.len() as f64,
        calls: 0,
    })
}

/// In-process backend over a [`SimulatedModelSpec`].
#[derive(Debug, Clone)]
pub struct SimulatedBackend {
    spec: Arc<SimulatedModelSpec>,
    reference: VerbalizerSet,
}

impl SimulatedBackend {
    pub fn new(spec: Arc<SimulatedModelSpec>, reference: VerbalizerSet) -> Result<Self> {
        if let Some(t) = reference.all_tokens().find(|&t| t as usize >= spec.vocab_size()) {
            return Err(invalid(format!("reference label word {t} outside vocabulary")));
        }
        Ok(Self { spec, reference })
    }

    pub fn spec(&self) -> &Arc<SimulatedModelSpec> {
        &self.spec
    }

    pub fn reference(&self) -> &VerbalizerSet {
        &self.reference
    }
}

impl Backend for SimulatedBackend {
    fn info(&self) -> ModelInfo {
        ModelInfo {
            layers: self.spec.layers(),
            prompt_dim: self.spec.prompt_dim(),
            vocab_size: self.spec.vocab_size(),
            num_classes: self.reference.num_classes(),
        }
    }

    fn forward(&self, request: &OracleRequest) -> Result<OracleResponse, OracleError> {
        simulate_forward(&self.spec, &self.reference, request)
    }

    fn embedding(&self, token: TokenId) -> Option<Vec<f64>> {
        self.spec.embedding(token)
    }

    fn embedding_std(&self) -> Option<f64> {
        Some(self.spec.embedding_std())
    }
}
