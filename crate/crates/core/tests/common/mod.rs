#![allow(dead_code)]

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use promptdfo::corpus::Example;
use promptdfo::initseek::render_prompt_text;
use promptdfo::oracle::{
    make_fixture_task_with, Backend, BatchItem, FixtureParams, FixtureTask, ModelInfo, Oracle, OracleRequest,
    OracleResponse,
};
use promptdfo::scheduler::Problem;
use promptdfo::subspace::Subspaces;
use promptdfo::OracleError;

pub fn render(task: &FixtureTask, examples: &[Example]) -> Vec<BatchItem> {
    examples
        .iter()
        .map(|e| render_prompt_text(&[], None, e, &task.template).unwrap())
        .collect()
}

/// Fixture task, oracle handles, rendered batches and projections.
pub struct Setup {
    pub task: FixtureTask,
    pub oracle: Oracle,
    pub monitor: Oracle,
    pub subspaces: Subspaces,
    pub train: Vec<BatchItem>,
    pub val: Vec<BatchItem>,
}

impl Setup {
    pub fn new(params: &FixtureParams, task_seed: u64, shots: usize, d: usize, sigma_a: f64, seed: u64) -> Self {
        let task = make_fixture_task_with(params, task_seed, 2, shots).unwrap();
        Self::from_task(task, d, sigma_a, seed)
    }

    pub fn from_task(task: FixtureTask, d: usize, sigma_a: f64, seed: u64) -> Self {
        let oracle = task.oracle();
        let monitor = oracle.fork();
        let subspaces = Subspaces::generate(task.spec.layers(), d, task.spec.prompt_dim(), sigma_a, seed).unwrap();
        let train = render(&task, task.corpus.train());
        let val = render(&task, task.corpus.validation());
        Self {
            task,
            oracle,
            monitor,
            subspaces,
            train,
            val,
        }
    }

    /// A tiny model that makes budget tests cheap.
    pub fn tiny(layers: usize, d: usize) -> Self {
        let params = FixtureParams {
            layers,
            prompt_dim: 8,
            cue_words: 2,
            label_words: 2,
            neutral_words: 4,
            example_len: 4,
            ..FixtureParams::default()
        };
        Self::new(&params, 5, 2, d, 0.3, 9)
    }

    pub fn problem(&self) -> Problem<'_> {
        Problem {
            subspaces: &self.subspaces,
            train_oracle: &self.oracle,
            monitor: Some(&self.monitor),
            train_batch: &self.train,
            val_batch: &self.val,
            verbalizers: &self.task.manual,
        }
    }
}

/// Wraps a backend and fails every call after the first `ok` ones.
pub struct FailingAfter {
    pub inner: Arc<dyn Backend>,
    pub ok: u64,
    pub seen: AtomicU64,
}

impl Backend for FailingAfter {
    fn info(&self) -> ModelInfo {
        self.inner.info()
    }

    fn forward(&self, request: &OracleRequest) -> Result<OracleResponse, OracleError> {
        if self.seen.fetch_add(1, Ordering::SeqCst) >= self.ok {
            return Err(OracleError::Unavailable {
                attempts: 1,
                last: "injected".into(),
            });
        }
        self.inner.forward(request)
    }
}
