//! The black box: a prompted forward pass over a templated batch.
//!
//! Every backend is reached through [`Oracle`], which owns the call counter.
//! A call is counted exactly once, and only when the backend produced a
//! response. [`Oracle::fork`] shares the backend under a fresh counter so that
//! budgeted optimization calls and auxiliary calls (validation, searches) can
//! be reconciled separately.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::error::OracleError;

pub mod fixture;
pub mod remote;
pub mod server;
pub mod simulated;
pub mod wire;

pub use fixture::{make_fixture_task, make_fixture_task_with, FixtureParams, FixtureTask};
pub use remote::{RemoteBackend, RemoteConfig};
pub use simulated::{SimulatedBackend, SimulatedModelSpec};

/// One templated input: token ids, the `[MASK]` position and the class label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchItem {
    pub tokens: Vec<TokenId>,
    pub mask: usize,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleRequest {
    /// One prompt vector of length `D` per layer.
    pub prompts: Vec<Vec<f64>>,
    pub batch: Vec<BatchItem>,
    pub id: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResponse {
    /// Vocabulary distribution at the mask position, one per batch item.
    pub probs: Vec<Vec<f64>>,
    /// Backend-side loss under the backend's reference label words.
    pub loss: f64,
    /// Value of the client-side call counter after this call.
    pub calls: u64,
}

/// Shape of the model behind a backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub layers: usize,
    pub prompt_dim: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
}

impl OracleRequest {
    /// Checks shapes against `info`; errors are reported as rejections.
    pub fn validate(&self, info: &ModelInfo) -> Result<(), OracleError> {
        if self.prompts.len() != info.layers {
            return Err(OracleError::Rejected(format!(
                "expected {} prompt vectors, got {}",
                info.layers,
                self.prompts.len()
            )));
        }
        for (l, p) in self.prompts.iter().enumerate() {
            if p.len() != info.prompt_dim {
                return Err(OracleError::Rejected(format!(
                    "prompt {l} has length {}, expected {}",
                    p.len(),
                    info.prompt_dim
                )));
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(OracleError::Rejected(format!("prompt {l} has non-finite entries")));
            }
        }
        if self.batch.is_empty() {
            return Err(OracleError::Rejected("batch is empty".into()));
        }
        for (i, item) in self.batch.iter().enumerate() {
            if item.mask >= item.tokens.len() {
                return Err(OracleError::Rejected(format!(
                    "item {i}: mask position {} outside sequence of length {}",
                    item.mask,
                    item.tokens.len()
                )));
            }
            if let Some(t) = item.tokens.iter().find(|&&t| t as usize >= info.vocab_size) {
                return Err(OracleError::Rejected(format!("item {i}: token id {t} outside vocabulary")));
            }
            if item.label >= info.num_classes {
                return Err(OracleError::Rejected(format!(
                    "item {i}: label {} outside {} classes",
                    item.label, info.num_classes
                )));
            }
        }
        Ok(())
    }
}

/// A model reachable only through forward passes.
pub trait Backend: Send + Sync {
    fn info(&self) -> ModelInfo;

    fn forward(&self, request: &OracleRequest) -> Result<OracleResponse, OracleError>;

    /// Input embedding of `token`, when the backend exposes its table.
    fn embedding(&self, _token: TokenId) -> Option<Vec<f64>> {
        None
    }

    /// Standard deviation of all embedding entries, when known.
    fn embedding_std(&self) -> Option<f64> {
        None
    }
}

/// Counted handle to a backend.
pub struct Oracle {
    backend: Arc<dyn Backend>,
    calls: AtomicU64,
}

impl Oracle {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Self {
            backend,
            calls: AtomicU64::new(0),
        }
    }

    pub fn simulated(backend: SimulatedBackend) -> Self {
        Self::new(Arc::new(backend))
    }

    /// Same backend, independent zeroed counter.
    pub fn fork(&self) -> Self {
        Self::new(Arc::clone(&self.backend))
    }

    pub fn backend(&self) -> &Arc<dyn Backend> {
        &self.backend
    }

    pub fn info(&self) -> ModelInfo {
        self.backend.info()
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn evaluate(&self, request: &OracleRequest) -> Result<OracleResponse, OracleError> {
        let mut response = self.backend.forward(request)?;
        response.calls = self.calls.fetch_add(1, Ordering::SeqCst) + 1;
        Ok(response)
    }

    pub fn embedding(&self, token: TokenId) -> Option<Vec<f64>> {
        self.backend.embedding(token)
    }

    pub fn embedding_std(&self) -> Option<f64> {
        self.backend.embedding_std()
    }
}

impl std::fmt::Debug for Oracle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Oracle")
            .field("info", &self.info())
            .field("calls", &self.calls())
            .finish()
    }
}
