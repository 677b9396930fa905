//! End-to-end experiment: label words, initial prompt, two-stage search, and
//! the artifacts of one seed.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{BackendConfig, ExperimentConfig};
use crate::corpus::{Example, FewShotCorpus, TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::initseek::{
    embed_initial_prompt, initial_prompt_tokens, render_prompt_text, select_demonstration, DemoSelection, Template,
};
use crate::oracle::fixture::{make_fixture_task_with, FixtureParams, FixtureTask};
use crate::oracle::{Backend, BatchItem, Oracle, RemoteBackend, RemoteConfig};
use crate::scheduler::{run_two_stage, Problem, RunRecord};
use crate::subspace::{compute_sigma_a, ScalingParams, Subspaces};
use crate::verbalizer::{assemble_m2, auto_candidates, tfidf_candidates, VerbalizerSet};

/// Task definition independent of the model behind the oracle.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub vocab: Vocabulary,
    pub corpus: FewShotCorpus,
    pub template: Template,
    pub instruction: Vec<TokenId>,
    pub manual: VerbalizerSet,
}

impl From<&FixtureTask> for TaskData {
    fn from(t: &FixtureTask) -> Self {
        Self {
            vocab: t.vocab.clone(),
            corpus: t.corpus.clone(),
            template: t.template.clone(),
            instruction: t.instruction.clone(),
            manual: t.manual.clone(),
        }
    }
}

/// JSON task file: texts are whitespace-tokenized against `vocab`, which
/// must begin with `[MASK]` and `</s>`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskFile {
    pub vocab: Vocabulary,
    pub template: String,
    #[serde(default)]
    pub instruction: String,
    pub label_words: Vec<Vec<String>>,
    pub train: Vec<TextExample>,
    pub validation: Vec<TextExample>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextExample {
    /// One string per template slot.
    pub text: Vec<String>,
    pub label: usize,
}

impl TaskFile {
    pub fn from_task(data: &TaskData) -> Result<Self> {
        let v = &data.vocab;
        let texts = |xs: &[Example]| {
            xs.iter()
                .map(|e| {
                    Ok(TextExample {
                        text: e.segments.iter().map(|s| v.decode(s)).collect::<Result<_>>()?,
                        label: e.label,
                    })
                })
                .collect::<Result<Vec<_>>>()
        };
        Ok(Self {
            vocab: v.clone(),
            template: data.template.text().to_string(),
            instruction: v.decode(&data.instruction)?,
            label_words: (0..data.manual.num_classes())
                .map(|c| data.manual.class_tokens(c).iter().map(|&t| Ok(v.token(t)?.to_string())).collect())
                .collect::<Result<_>>()?,
            train: texts(data.corpus.train())?,
            validation: texts(data.corpus.validation())?,
        })
    }

    pub fn into_task(self) -> Result<TaskData> {
        let vocab = self.vocab;
        let classes = self.label_words.len();
        let examples = |xs: Vec<TextExample>| {
            xs.into_iter()
                .map(|e| {
                    Ok(Example {
                        segments: e.text.iter().map(|s| vocab.encode(s)).collect::<Result<_>>()?,
                        label: e.label,
                    })
                })
                .collect::<Result<Vec<_>>>()
        };
        let train = examples(self.train)?;
        let validation = examples(self.validation)?;
        let shots = train.iter().filter(|e| e.label == 0).count();
        let corpus = FewShotCorpus::new(train, validation, classes, shots)?;
        let words: Vec<Vec<&str>> = self
            .label_words
            .iter()
            .map(|ws| ws.iter().map(String::as_str).collect())
            .collect();
        let refs: Vec<&[&str]> = words.iter().map(Vec::as_slice).collect();
        let manual = VerbalizerSet::from_words(&vocab, &refs)?;
        Ok(TaskData {
            template: Template::parse(&self.template, &vocab)?,
            instruction: vocab.encode(&self.instruction)?,
            corpus,
            manual,
            vocab,
        })
    }

    pub fn load(path: &Path) -> Result<TaskData> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        let file: TaskFile = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        file.into_task()
    }
}

/// Run-time failure, carrying whatever the scheduler recorded.
#[derive(Debug, thiserror::Error)]
#[error("{source}")]
pub struct PipelineError {
    pub partial: Option<Box<RunRecord>>,
    #[source]
    pub source: Error,
}

impl From<Error> for PipelineError {
    fn from(source: Error) -> Self {
        Self { partial: None, source }
    }
}

pub struct Experiment {
    pub config: ExperimentConfig,
    pub data: TaskData,
    pub backend: Arc<dyn Backend>,
    pub sigma_hat: f64,
}

impl std::fmt::Debug for Experiment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Experiment")
            .field("config", &self.config)
            .field("model", &self.backend.info())
            .field("sigma_hat", &self.sigma_hat)
            .finish()
    }
}

/// Per-seed outcome with the call accounting of every oracle handle.
#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub record: RunRecord,
    pub verbalizers: VerbalizerSet,
    pub demo: Option<DemoSelection>,
    pub sigma_a: f64,
    pub train_calls: u64,
    pub validation_calls: u64,
    pub setup_calls: u64,
}

impl Experiment {
    /// Builds the backend named by the configuration.
    pub fn prepare(config: ExperimentConfig) -> Result<Self> {
        match &config.backend {
            &BackendConfig::Fixture {
                fixture_seed,
                classes,
                shots,
                layers,
                prompt_dim,
            } => {
                let params = FixtureParams {
                    layers,
                    prompt_dim,
                    ..FixtureParams::default()
                };
                let task = make_fixture_task_with(&params, fixture_seed, classes, shots)?;
                let backend: Arc<dyn Backend> = Arc::new(task.backend());
                Self::with_backend(config, TaskData::from(&task), backend)
            }
            BackendConfig::Remote {
                endpoint,
                task_file,
                layers,
                prompt_dim,
                retries,
                max_in_flight,
                ..
            } => {
                let data = TaskFile::load(task_file)?;
                let info = crate::oracle::ModelInfo {
                    layers: *layers,
                    prompt_dim: *prompt_dim,
                    vocab_size: data.vocab.len(),
                    num_classes: data.corpus.num_classes(),
                };
                let mut rc = RemoteConfig::new(endpoint.clone(), info);
                rc.retries = *retries;
                rc.max_in_flight = *max_in_flight;
                let backend: Arc<dyn Backend> = Arc::new(RemoteBackend::new(rc)?);
                Self::with_backend(config, data, backend)
            }
        }
    }

    pub fn with_backend(config: ExperimentConfig, data: TaskData, backend: Arc<dyn Backend>) -> Result<Self> {
        let info = backend.info();
        if info.layers != config.layers() {
            return Err(Error::Config {
                field: "Layers".into(),
                message: format!("backend has {} layers, config says {}", info.layers, config.layers()),
            });
        }
        if info.vocab_size != data.vocab.len() {
            return Err(Error::Format(format!(
                "backend vocabulary has {} tokens, task has {}",
                info.vocab_size,
                data.vocab.len()
            )));
        }
        let sigma_hat = match (&config.backend, backend.embedding_std()) {
            (BackendConfig::Remote { sigma_hat, .. }, _) => *sigma_hat,
            (_, Some(s)) => s,
            (_, None) => {
                return Err(Error::Config {
                    field: "SigmaHat".into(),
                    message: "backend does not report its embedding std".into(),
                })
            }
        };
        Ok(Self {
            config,
            data,
            backend,
            sigma_hat,
        })
    }

    pub fn oracle(&self) -> Oracle {
        Oracle::new(Arc::clone(&self.backend))
    }

    /// Active label words: a verbalizer file wins, then the multi-source assembly when
    /// toggled, else the manual words.
    pub fn verbalizers(&self, setup: &Oracle) -> Result<VerbalizerSet> {
        if let Some(path) = &self.config.verbalizer {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
            return VerbalizerSet::from_json(&text, &self.data.vocab);
        }
        if self.config.toggles.m2_verbalizers {
            return self.build_m2(setup);
        }
        Ok(self.data.manual.clone())
    }

    pub fn build_m2(&self, setup: &Oracle) -> Result<VerbalizerSet> {
        let cap = self.config.per_class_cap;
        let manual: Vec<Vec<TokenId>> = (0..self.data.manual.num_classes())
            .map(|c| self.data.manual.class_tokens(c))
            .collect();
        let tfidf = tfidf_candidates(&self.data.corpus, &self.data.vocab, cap)?;
        let auto = auto_candidates(&self.data.corpus, setup, &self.data.template, &self.data.vocab, cap)?;
        assemble_m2(&manual, &tfidf, &auto, cap)
    }

    pub fn render(&self, examples: &[Example]) -> Result<Vec<BatchItem>> {
        examples
            .iter()
            .map(|e| render_prompt_text(&[], None, e, &self.data.template))
            .collect()
    }

    pub fn run_seed(&self, seed: u64) -> Result<SeedOutcome, PipelineError> {
        let train_oracle = self.oracle();
        let monitor = train_oracle.fork();
        let setup = train_oracle.fork();
        let verbalizers = self.verbalizers(&setup)?;
        let info = train_oracle.info();
        let cfg = &self.config;

        let (demo, initial) = if cfg.toggles.in2_init {
            let selection = select_demonstration(
                &self.data.corpus,
                &self.data.instruction,
                &self.data.template,
                &setup,
                &verbalizers,
            )
            .map_err(|e| PipelineError::from(e.source))?;
            let tokens = initial_prompt_tokens(&self.data.instruction, Some(&selection.demonstration));
            let p0 = embed_initial_prompt(&tokens, &setup)?;
            (Some(selection), Some(p0))
        } else {
            (None, None)
        };

        let sigma_a = compute_sigma_a(&ScalingParams {
            alpha: cfg.alpha,
            sigma_hat: self.sigma_hat,
            sigma_z: cfg.sigma1,
            dim: cfg.intrinsic_dim,
        })?;
        let mut subspaces = Subspaces::generate(info.layers, cfg.intrinsic_dim, info.prompt_dim, sigma_a, seed)?;
        if let Some(p0) = initial {
            subspaces = subspaces.with_initial(p0)?;
        }
        let train_batch = self.render(self.data.corpus.train())?;
        let val_batch = self.render(self.data.corpus.validation())?;
        let problem = Problem {
            subspaces: &subspaces,
            train_oracle: &train_oracle,
            monitor: Some(&monitor),
            train_batch: &train_batch,
            val_batch: &val_batch,
            verbalizers: &verbalizers,
        };
        let record = run_two_stage(&cfg.two_stage_config(seed), problem).map_err(|e| PipelineError {
            partial: Some(e.record),
            source: e.source,
        })?;
        Ok(SeedOutcome {
            seed,
            record,
            verbalizers,
            demo,
            sigma_a,
            train_calls: train_oracle.calls(),
            validation_calls: monitor.calls(),
            setup_calls: setup.calls(),
        })
    }
}

pub const CALLS_FILE: &str = "calls.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn seed_dir(output_dir: &Path, seed: u64) -> PathBuf {
    output_dir.join(format!("seed-{seed}"))
}

impl SeedOutcome {
    pub fn manifest(&self, exp: &Experiment) -> Result<serde_json::Value> {
        let r = &self.record;
        let selected = r.selected_reading;
        let verbalizers: serde_json::Value = serde_json::from_str(&self.verbalizers.to_json(&exp.data.vocab)?)
            .map_err(|e| Error::Format(e.to_string()))?;
        Ok(json!({
            "config": exp.config,
            "seed": self.seed,
            "model": exp.backend.info(),
            "sigma_hat": exp.sigma_hat,
            "sigma_a": self.sigma_a,
            "verbalizers": verbalizers,
            "demonstration": self.demo.as_ref().map(|d| json!({
                "index": d.demonstration.index,
                "text": exp.data.vocab.decode(&d.demonstration.tokens).unwrap_or_default(),
                "scores": d.scores,
            })),
            "calls": {
                "train": self.train_calls,
                "stage1": r.stage1_calls,
                "stage2": r.stage2_calls,
                "validation": self.validation_calls,
                "setup": self.setup_calls,
            },
            "stage2_fallback_layers": r.fallback_layers,
            "final": {
                "train_loss": r.best_train_loss,
                "selected_call": selected.map(|s| s.call),
                "val_loss": selected.map(|s| s.loss),
                "val_accuracy": selected.map(|s| s.accuracy),
                "val_f1": selected.map(|s| s.f1),
            },
        }))
    }

    /// Writes `seed-<seed>/calls.csv` and `seed-<seed>/manifest.json`.
    pub fn write(&self, exp: &Experiment, output_dir: &Path) -> Result<PathBuf> {
        let dir = seed_dir(output_dir, self.seed);
        std::fs::create_dir_all(&dir)?;
        let mut csv = Vec::new();
        self.record.write_csv(&mut csv)?;
        std::fs::write(dir.join(CALLS_FILE), csv)?;
        let manifest = serde_json::to_string_pretty(&self.manifest(exp)?).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(dir.join(MANIFEST_FILE), manifest + "\n")?;
        Ok(dir)
    }
}
