//! Flat TOML experiment configuration.
//!
//! Field names are PascalCase; the optimizer block uses the names `Budget1`,
//! `Budget2`, `Alpha`, `Sigma1`, `Sigma2`. Exactly one backend is chosen:
//! `FixtureSeed` for the built-in simulated task, or `Endpoint` (plus
//! `TaskFile`, `Layers`, `PromptDim`, `SigmaHat`) for a remote service.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scheduler::{Stage2Split, TwoStageConfig, DEFAULT_RHO_END};
use crate::verbalizer::DEFAULT_PER_CLASS_CAP;

fn config_err(field: &str, message: impl Into<String>) -> Error {
    Error::Config {
        field: field.to_string(),
        message: message.into(),
    }
}

/// File layout as written by users; every field optional so that missing
/// ones can be reported by name.
#[derive(Debug, Default, Deserialize)]
#[serde(rename_all = "PascalCase", deny_unknown_fields)]
struct RawConfig {
    budget1: Option<u64>,
    budget2: Option<u64>,
    alpha: Option<f64>,
    sigma1: Option<f64>,
    sigma2: Option<f64>,
    popsize: Option<usize>,
    intrinsic_dim: Option<usize>,
    layers: Option<usize>,
    prompt_dim: Option<usize>,
    seed: Option<u64>,
    stage2_split: Option<String>,
    rho_end: Option<f64>,
    two_stage: Option<bool>,
    m2_verbalizers: Option<bool>,
    in2_init: Option<bool>,
    per_class_cap: Option<usize>,
    verbalizer: Option<PathBuf>,
    fixture_seed: Option<u64>,
    classes: Option<usize>,
    shots: Option<usize>,
    endpoint: Option<String>,
    task_file: Option<PathBuf>,
    sigma_hat: Option<f64>,
    retries: Option<u32>,
    max_in_flight: Option<usize>,
    output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "PascalCase")]
pub struct Toggles {
    pub two_stage: bool,
    pub m2_verbalizers: bool,
    pub in2_init: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "PascalCase")]
pub enum BackendConfig {
    Fixture {
        fixture_seed: u64,
        classes: usize,
        shots: usize,
        layers: usize,
        prompt_dim: usize,
    },
    Remote {
        endpoint: String,
        task_file: PathBuf,
        layers: usize,
        prompt_dim: usize,
        sigma_hat: f64,
        retries: u32,
        max_in_flight: usize,
    },
}

/// A validated configuration; serializes back to the same field names for
/// the run manifest.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "PascalCase")]
pub struct ExperimentConfig {
    pub budget1: u64,
    pub budget2: u64,
    pub alpha: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    pub popsize: usize,
    pub intrinsic_dim: usize,
    pub seed: u64,
    pub stage2_split: Stage2Split,
    pub rho_end: f64,
    #[serde(flatten)]
    pub toggles: Toggles,
    pub per_class_cap: usize,
    pub verbalizer: Option<PathBuf>,
    pub backend: BackendConfig,
    pub output_dir: PathBuf,
}

pub const DEFAULT_POPSIZE: usize = 20;
pub const DEFAULT_INTRINSIC_DIM: usize = 100;
pub const DEFAULT_FIXTURE_LAYERS: usize = 3;
pub const DEFAULT_FIXTURE_PROMPT_DIM: usize = 128;

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let field = msg
                .split('`')
                .nth(1)
                .filter(|_| msg.contains("unknown field"))
                .unwrap_or("<file>")
                .to_string();
            Error::Config { field, message: msg }
        })?;
        Self::from_raw(raw)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        let mut config = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(v) = config.verbalizer.as_mut() {
            resolve(v);
        }
        if let BackendConfig::Remote { task_file, .. } = &mut config.backend {
            resolve(task_file);
        }
        Ok(config)
    }

    fn from_raw(raw: RawConfig) -> Result<Self> {
        let budget1 = raw.budget1.ok_or_else(|| config_err("Budget1", "missing (oracle calls for stage I)"))?;
        let budget2 = raw.budget2.ok_or_else(|| config_err("Budget2", "missing (oracle calls for stage II)"))?;
        let positive = |name: &str, v: Option<f64>| -> Result<f64> {
            let v = v.ok_or_else(|| config_err(name, "missing"))?;
            if v.is_finite() && v > 0.0 {
                Ok(v)
            } else {
                Err(config_err(name, format!("must be positive, got {v}")))
            }
        };
        let alpha = positive("Alpha", raw.alpha)?;
        let sigma1 = positive("Sigma1", raw.sigma1)?;
        let sigma2 = positive("Sigma2", raw.sigma2)?;
        let popsize = raw.popsize.unwrap_or(DEFAULT_POPSIZE);
        if popsize < 2 {
            return Err(config_err("Popsize", "must be >= 2"));
        }
        let intrinsic_dim = raw.intrinsic_dim.unwrap_or(DEFAULT_INTRINSIC_DIM);
        if intrinsic_dim < 1 {
            return Err(config_err("IntrinsicDim", "must be >= 1"));
        }
        let stage2_split = match raw.stage2_split {
            Some(s) => s.parse().map_err(|e: Error| config_err("Stage2Split", e.to_string()))?,
            None => Stage2Split::default(),
        };
        let rho_end = raw.rho_end.unwrap_or(DEFAULT_RHO_END.min(sigma2));
        if !(rho_end > 0.0 && rho_end <= sigma2) {
            return Err(config_err("RhoEnd", "must be positive and at most Sigma2"));
        }
        let toggles = Toggles {
            two_stage: raw.two_stage.unwrap_or(true),
            m2_verbalizers: raw.m2_verbalizers.unwrap_or(true),
            in2_init: raw.in2_init.unwrap_or(true),
        };
        let per_class_cap = raw.per_class_cap.unwrap_or(DEFAULT_PER_CLASS_CAP);
        if per_class_cap < 1 {
            return Err(config_err("PerClassCap", "must be >= 1"));
        }
        let layers = raw.layers;
        if layers == Some(0) {
            return Err(config_err("Layers", "must be >= 1"));
        }
        let backend = match (raw.fixture_seed, raw.endpoint) {
            (Some(_), Some(_)) => {
                return Err(config_err("Endpoint", "set either FixtureSeed or Endpoint, not both"));
            }
            (None, None) => {
                return Err(config_err("FixtureSeed", "missing (or set Endpoint for a remote oracle)"));
            }
            (Some(fixture_seed), None) => {
                for (name, set) in [
                    ("TaskFile", raw.task_file.is_some()),
                    ("SigmaHat", raw.sigma_hat.is_some()),
                    ("Retries", raw.retries.is_some()),
                    ("MaxInFlight", raw.max_in_flight.is_some()),
                ] {
                    if set {
                        return Err(config_err(name, "only valid with Endpoint"));
                    }
                }
                let classes = raw.classes.unwrap_or(2);
                if classes < 2 {
                    return Err(config_err("Classes", "must be >= 2"));
                }
                let shots = raw.shots.unwrap_or(16);
                if shots < 1 {
                    return Err(config_err("Shots", "must be >= 1"));
                }
                BackendConfig::Fixture {
                    fixture_seed,
                    classes,
                    shots,
                    layers: layers.unwrap_or(DEFAULT_FIXTURE_LAYERS),
                    prompt_dim: raw.prompt_dim.unwrap_or(DEFAULT_FIXTURE_PROMPT_DIM),
                }
            }
            (None, Some(endpoint)) => {
                if raw.classes.is_some() || raw.shots.is_some() {
                    return Err(config_err("Classes", "Classes/Shots only apply to the fixture backend"));
                }
                if toggles.in2_init {
                    return Err(config_err(
                        "In2Init",
                        "a remote oracle exposes no embedding table; set In2Init = false",
                    ));
                }
                BackendConfig::Remote {
                    endpoint,
                    task_file: raw
                        .task_file
                        .ok_or_else(|| config_err("TaskFile", "missing (required with Endpoint)"))?,
                    layers: layers.ok_or_else(|| config_err("Layers", "missing (required with Endpoint)"))?,
                    prompt_dim: raw
                        .prompt_dim
                        .ok_or_else(|| config_err("PromptDim", "missing (required with Endpoint)"))?,
                    sigma_hat: positive("SigmaHat", raw.sigma_hat)
                        .map_err(|e| config_err("SigmaHat", format!("{e} (required with Endpoint)")))?,
                    retries: raw.retries.unwrap_or(3),
                    max_in_flight: raw.max_in_flight.unwrap_or(8),
                }
            }
        };
        let prompt_dim = match &backend {
            BackendConfig::Fixture { prompt_dim, .. } | BackendConfig::Remote { prompt_dim, .. } => *prompt_dim,
        };
        if intrinsic_dim > prompt_dim {
            return Err(config_err(
                "IntrinsicDim",
                format!("{intrinsic_dim} exceeds PromptDim {prompt_dim}"),
            ));
        }
        Ok(Self {
            budget1,
            budget2,
            alpha,
            sigma1,
            sigma2,
            popsize,
            intrinsic_dim,
            seed: raw.seed.unwrap_or(42),
            stage2_split,
            rho_end,
            toggles,
            per_class_cap,
            verbalizer: raw.verbalizer,
            backend,
            output_dir: raw.output_dir.unwrap_or_else(|| PathBuf::from("runs")),
        })
    }

    pub fn layers(&self) -> usize {
        match &self.backend {
            BackendConfig::Fixture { layers, .. } | BackendConfig::Remote { layers, .. } => *layers,
        }
    }

    /// Scheduler settings for `seed`; without the two-stage toggle the whole
    /// budget goes to stage I.
    pub fn two_stage_config(&self, seed: u64) -> TwoStageConfig {
        let cfg = TwoStageConfig {
            budget1: self.budget1,
            budget2: self.budget2,
            popsize: self.popsize,
            intrinsic_dim: self.intrinsic_dim,
            alpha: self.alpha,
            sigma1: self.sigma1,
            sigma2: self.sigma2,
            layers: self.layers(),
            seed,
            stage2_split: self.stage2_split,
            rho_end: self.rho_end,
        };
        if self.toggles.two_stage {
            cfg
        } else {
            cfg.pure_cma()
        }
    }
}
