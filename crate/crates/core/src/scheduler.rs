//! Two-stage budgeted optimization over per-layer intrinsic vectors.
//!
//! Stage I cycles the layers round-robin, running one CMA-ES generation per
//! visit with every other layer frozen at the best configuration found so far.
//! Each layer keeps its own CMA-ES state for the whole stage. Stage II then
//! refines each layer in turn with the simplex trust-region search. One oracle
//! call is one forward pass over the whole training batch.
//!
//! Validation is read through a separate oracle handle after every stage-I
//! generation and every stage-II step, and re-evaluated only when the best
//! training configuration has changed. The reported model is the snapshot
//! with the lowest validation loss.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cmaes::CmaEsState;
use crate::cobyla::{coordinate_search, CobylaState};
use crate::error::{invalid, Error, Result};
use crate::oracle::{BatchItem, Oracle, OracleRequest};
use crate::subspace::{IntrinsicVector, Subspaces};
use crate::task::evaluate_batch;
use crate::verbalizer::VerbalizerSet;

/// Radius at which a stage-II trust-region run counts as converged.
pub const DEFAULT_RHO_END: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage2Split {
    /// `b2 / d` calls for every layer.
    PerLayerB2DivD,
    /// `b2 / L` calls per layer, remainder to the first layers.
    #[default]
    PerLayerB2DivL,
    /// All of `b2` on layer 0.
    AllOnInputLayer,
}

impl Stage2Split {
    pub const NAMES: [&'static str; 3] = ["per_layer_b2_div_d", "per_layer_b2_div_L", "all_on_input_layer"];

    pub fn name(self) -> &'static str {
        match self {
            Self::PerLayerB2DivD => Self::NAMES[0],
            Self::PerLayerB2DivL => Self::NAMES[1],
            Self::AllOnInputLayer => Self::NAMES[2],
        }
    }
}

impl fmt::Display for Stage2Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage2Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_layer_b2_div_d" => Ok(Self::PerLayerB2DivD),
            "per_layer_b2_div_L" | "per_layer_b2_div_l" => Ok(Self::PerLayerB2DivL),
            "all_on_input_layer" => Ok(Self::AllOnInputLayer),
            _ => Err(invalid(format!(
                "unknown stage-2 split `{s}` (expected one of {})",
                Self::NAMES.join(", ")
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoStageConfig {
    pub budget1: u64,
    pub budget2: u64,
    pub popsize: usize,
    pub intrinsic_dim: usize,
    pub alpha: f64,
    /// Initial CMA-ES step size; also `σ_z` in the projection scale.
    pub sigma1: f64,
    /// Initial trust-region radius of stage II.
    pub sigma2: f64,
    pub layers: usize,
    pub seed: u64,
    pub stage2_split: Stage2Split,
    pub rho_end: f64,
}

impl TwoStageConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(invalid(format!("{field}: {msg}")));
        if self.popsize < 2 {
            return bad("popsize", "must be >= 2");
        }
        if self.intrinsic_dim < 1 {
            return bad("intrinsic_dim", "must be >= 1");
        }
        if self.layers < 1 {
            return bad("layers", "must be >= 1");
        }
        for (name, v) in [("alpha", self.alpha), ("sigma1", self.sigma1), ("sigma2", self.sigma2)] {
            if !(v.is_finite() && v > 0.0) {
                return bad(name, "must be positive");
            }
        }
        if !(self.rho_end > 0.0 && self.rho_end <= self.sigma2) {
            return bad("rho_end", "must be positive and at most sigma2");
        }
        Ok(())
    }

    /// Same total budget, all of it spent in stage I.
    pub fn pure_cma(&self) -> Self {
        Self {
            budget1: self.budget1 + self.budget2,
            budget2: 0,
            ..self.clone()
        }
    }

    /// Stage-II call cap for each layer; the caps sum to at most `budget2`.
    pub fn stage2_caps(&self) -> Vec<u64> {
        let l = self.layers as u64;
        let mut caps: Vec<u64> = match self.stage2_split {
            Stage2Split::PerLayerB2DivD => vec![self.budget2 / self.intrinsic_dim as u64; self.layers],
            Stage2Split::PerLayerB2DivL => (0..l)
                .map(|i| self.budget2 / l + u64::from(i < self.budget2 % l))
                .collect(),
            Stage2Split::AllOnInputLayer => {
                let mut v = vec![0; self.layers];
                v[0] = self.budget2;
                v
            }
        };
        let mut left = self.budget2;
        for c in &mut caps {
            *c = (*c).min(left);
            left -= *c;
        }
        caps
    }

    fn cma_seed(&self, layer: usize) -> u64 {
        self.seed ^ ((layer as u64 + 1) << 32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Self::One => 1,
            Self::Two => 2,
        }
    }
}

/// One training-oracle call.
#[derive(Debug, Clone, PartialEq)]
pub struct CallRow {
    pub call: u64,
    pub stage: Stage,
    pub layer: usize,
    pub train_loss: f64,
    pub best_train_loss: f64,
    /// Set on the last call of a generation (stage I) or step (stage II).
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

/// Validation metrics of the best training configuration after `call` calls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValReading {
    pub call: u64,
    pub stage: Stage,
    pub loss: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub train_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub seed: u64,
    pub rows: Vec<CallRow>,
    pub readings: Vec<ValReading>,
    /// Configuration with the lowest training loss.
    pub best_train: Vec<IntrinsicVector>,
    pub best_train_loss: f64,
    /// Configuration with the lowest validation loss (the reported model).
    pub selected: Vec<IntrinsicVector>,
    pub selected_reading: Option<ValReading>,
    pub stage1_calls: u64,
    pub stage2_calls: u64,
    /// Layers whose stage-II cap was too small for the simplex search.
    pub fallback_layers: Vec<usize>,
}

impl RunRecord {
    pub fn calls(&self) -> u64 {
        self.rows.len() as u64
    }

    /// Largest increase between consecutive validation losses whose later
    /// reading lies in `stage`.
    pub fn max_val_increase(&self, stage: Stage) -> f64 {
        self.readings
            .windows(2)
            .filter(|w| w[1].stage == stage)
            .map(|w| w[1].loss - w[0].loss)
            .fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "call,stage,layer,train_loss,best_train_loss,val_loss,val_accuracy")?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.call,
                r.stage.number(),
                r.layer,
                r.train_loss,
                r.best_train_loss,
                opt(r.val_loss),
                opt(r.val_accuracy)
            )?;
        }
        Ok(())
    }
}

/// Oracle failure mid-run, with everything recorded up to that point.
#[derive(Debug, thiserror::Error)]
#[error("optimization aborted after {} calls: {source}", .record.calls())]
pub struct StageError {
    pub record: Box<RunRecord>,
    #[source]
    pub source: Error,
}

/// What the scheduler optimizes: prompts are `p0 + Π·z` per layer, scored on
/// the training batch through `train_oracle`.
#[derive(Clone, Copy)]
pub struct Problem<'a> {
    pub subspaces: &'a Subspaces,
    pub train_oracle: &'a Oracle,
    /// Separate handle for validation readings; `None` disables them.
    pub monitor: Option<&'a Oracle>,
    pub train_batch: &'a [BatchItem],
    pub val_batch: &'a [BatchItem],
    pub verbalizers: &'a VerbalizerSet,
}

impl Problem<'_> {
    fn check(&self, config: &TwoStageConfig) -> Result<()> {
        config.validate()?;
        crate::error::check_len("subspace layers", config.layers, self.subspaces.layers())?;
        crate::error::check_len("intrinsic dimension", config.intrinsic_dim, self.subspaces.intrinsic_dim())?;
        let info = self.train_oracle.info();
        crate::error::check_len("oracle layers", config.layers, info.layers)?;
        crate::error::check_len("prompt dimension", info.prompt_dim, self.subspaces.prompt_dim())?;
        if self.train_batch.is_empty() {
            return Err(invalid("training batch is empty"));
        }
        if self.monitor.is_some() && self.val_batch.is_empty() {
            return Err(invalid("validation batch is empty"));
        }
        Ok(())
    }

    fn prompts(&self, best: &[IntrinsicVector], layer: usize, z: &[f64]) -> Result<Vec<Vec<f64>>> {
        (0..best.len())
            .map(|l| {
                let zl = if l == layer {
                    IntrinsicVector::new(z.to_vec(), l)?
                } else {
                    best[l].clone()
                };
                let pt = crate::subspace::project(self.subspaces.projection(l), &zl)?;
                Ok(self
                    .subspaces
                    .initial(l)
                    .values()
                    .iter()
                    .zip(pt.values())
                    .map(|(a, b)| a + b)
                    .collect())
            })
            .collect()
    }

    fn loss(&self, best: &[IntrinsicVector], layer: usize, z: &[f64], id: u64) -> Result<f64> {
        let request = OracleRequest {
            prompts: self.prompts(best, layer, z)?,
            batch: self.train_batch.to_vec(),
            id,
        };
        Ok(evaluate_batch(self.train_oracle, &request, self.verbalizers)?.loss)
    }
}

/// Incremental two-stage run; [`run_two_stage`] drives it end to end.
pub struct TwoStageRun<'a> {
    config: TwoStageConfig,
    problem: Problem<'a>,
    record: RunRecord,
    best_val_loss: f64,
    dirty: bool,
}

impl<'a> TwoStageRun<'a> {
    pub fn new(config: &TwoStageConfig, problem: Problem<'a>) -> Result<Self> {
        problem.check(config)?;
        let origin = problem.subspaces.origin();
        Ok(Self {
            record: RunRecord {
                seed: config.seed,
                rows: Vec::new(),
                readings: Vec::new(),
                best_train: origin.clone(),
                best_train_loss: f64::INFINITY,
                selected: origin,
                selected_reading: None,
                stage1_calls: 0,
                stage2_calls: 0,
                fallback_layers: Vec::new(),
            },
            config: config.clone(),
            problem,
            best_val_loss: f64::INFINITY,
            dirty: true,
        })
    }

    /// Continues from an earlier record (typically the output of stage I).
    pub fn resume(config: &TwoStageConfig, problem: Problem<'a>, record: RunRecord) -> Result<Self> {
        problem.check(config)?;
        let best_val_loss = record.selected_reading.map_or(f64::INFINITY, |r| r.loss);
        Ok(Self {
            config: config.clone(),
            problem,
            record,
            best_val_loss,
            dirty: false,
        })
    }

    pub fn record(&self) -> &RunRecord {
        &self.record
    }

    pub fn into_record(self) -> RunRecord {
        self.record
    }

    fn fail(&self, source: Error) -> StageError {
        StageError {
            record: Box::new(self.record.clone()),
            source,
        }
    }

    fn note(&mut self, stage: Stage, layer: usize, z: &[f64], loss: f64) {
        if loss < self.record.best_train_loss {
            self.record.best_train_loss = loss;
            self.record.best_train[layer] =
                IntrinsicVector::new(z.to_vec(), layer).expect("evaluated points are finite");
            self.dirty = true;
        }
        let call = self.record.rows.len() as u64 + 1;
        self.record.rows.push(CallRow {
            call,
            stage,
            layer,
            train_loss: loss,
            best_train_loss: self.record.best_train_loss,
            val_loss: None,
            val_accuracy: None,
        });
        match stage {
            Stage::One => self.record.stage1_calls += 1,
            Stage::Two => self.record.stage2_calls += 1,
        }
    }

    /// Validation reading of the current best configuration.
    fn checkpoint(&mut self, stage: Stage) -> Result<()> {
        let Some(monitor) = self.problem.monitor else {
            if self.dirty {
                self.record.selected = self.record.best_train.clone();
                self.dirty = false;
            }
            return Ok(());
        };
        let call = self.record.rows.len() as u64;
        let reading = match (self.dirty, self.record.readings.last()) {
            (false, Some(last)) => ValReading { call, stage, ..*last },
            _ => {
                let best = &self.record.best_train;
                let request = OracleRequest {
                    prompts: self.problem.prompts(best, 0, best[0].values())?,
                    batch: self.problem.val_batch.to_vec(),
                    id: call,
                };
                let eval = evaluate_batch(monitor, &request, self.problem.verbalizers)?;
                ValReading {
                    call,
                    stage,
                    loss: eval.loss,
                    accuracy: eval.accuracy,
                    f1: eval.f1,
                    train_loss: self.record.best_train_loss,
                }
            }
        };
        self.dirty = false;
        if let Some(row) = self.record.rows.last_mut() {
            row.val_loss = Some(reading.loss);
            row.val_accuracy = Some(reading.accuracy);
        }
        if reading.loss < self.best_val_loss {
            self.best_val_loss = reading.loss;
            self.record.selected = self.record.best_train.clone();
            self.record.selected_reading = Some(reading);
        }
        self.record.readings.push(reading);
        Ok(())
    }

    /// Spends exactly `budget1` calls; a trailing partial generation is
    /// evaluated but not told to its CMA-ES state.
    pub fn stage1(&mut self) -> Result<(), StageError> {
        let budget = self.config.budget1;
        if budget == 0 {
            return Ok(());
        }
        if self.record.readings.is_empty() {
            self.checkpoint(Stage::One).map_err(|e| self.fail(e))?;
        }
        let layers = self.config.layers;
        let mut states = (0..layers)
            .map(|l| {
                CmaEsState::new(
                    self.record.best_train[l].values().to_vec(),
                    self.config.sigma1,
                    Some(self.config.popsize),
                    self.config.cma_seed(l),
                )
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| self.fail(e))?;
        let mut used = 0u64;
        let mut generation = 0usize;
        while used < budget {
            let layer = generation % layers;
            generation += 1;
            let mut candidates = states[layer].ask();
            let take = (candidates.len() as u64).min(budget - used) as usize;
            let best = self.record.best_train.clone();
            let base_id = self.record.rows.len() as u64;
            let problem = self.problem;
            let losses: Vec<Result<f64>> = candidates[..take]
                .par_iter()
                .enumerate()
                .map(|(i, c)| problem.loss(&best, layer, &c.point, base_id + i as u64 + 1))
                .collect();
            for (c, loss) in candidates.iter_mut().zip(losses) {
                let loss = loss.map_err(|e| self.fail(e))?;
                c.fitness = Some(loss);
                let point = c.point.clone();
                self.note(Stage::One, layer, &point, loss);
            }
            used += take as u64;
            if take == candidates.len() {
                states[layer].tell(&candidates).map_err(|e| self.fail(e))?;
            }
            self.checkpoint(Stage::One).map_err(|e| self.fail(e))?;
        }
        Ok(())
    }

    /// Refines each layer in order under its cap from
    /// [`TwoStageConfig::stage2_caps`].
    pub fn stage2(&mut self) -> Result<(), StageError> {
        if self.config.budget2 == 0 {
            return Ok(());
        }
        if self.record.readings.is_empty() {
            self.checkpoint(Stage::Two).map_err(|e| self.fail(e))?;
        }
        let d = self.config.intrinsic_dim as u64;
        for (layer, cap) in self.config.stage2_caps().into_iter().enumerate() {
            if cap == 0 {
                continue;
            }
            let r = if cap > d {
                self.simplex_layer(layer, cap)
            } else {
                log::info!("layer {layer}: stage-II cap {cap} < d+1 = {}, using coordinate search", d + 1);
                self.record.fallback_layers.push(layer);
                self.coordinate_layer(layer, cap)
            };
            r.map_err(|e| self.fail(e))?;
        }
        Ok(())
    }

    fn objective(&mut self, layer: usize) -> impl FnMut(&[f64]) -> Result<f64> + use<'_, 'a> {
        move |x: &[f64]| {
            let best = &self.record.best_train;
            let loss = self.problem.loss(best, layer, x, self.record.rows.len() as u64 + 1)?;
            self.note(Stage::Two, layer, x, loss);
            Ok(loss)
        }
    }

    fn simplex_layer(&mut self, layer: usize, cap: u64) -> Result<()> {
        let x0 = self.record.best_train[layer].values().to_vec();
        let (sigma2, rho_end) = (self.config.sigma2, self.config.rho_end);
        let mut state = CobylaState::init(&x0, sigma2, rho_end, &mut self.objective(layer))?;
        self.checkpoint(Stage::Two)?;
        while state.eval_count() < cap && !state.converged() {
            state.step(&mut self.objective(layer))?;
            self.checkpoint(Stage::Two)?;
        }
        Ok(())
    }

    fn coordinate_layer(&mut self, layer: usize, mut cap: u64) -> Result<()> {
        let x0 = self.record.best_train[layer].values().to_vec();
        let mut f0 = self.record.best_train_loss;
        if !f0.is_finite() {
            f0 = self.objective(layer)(&x0)?;
            cap -= 1;
        }
        let (sigma2, rho_end) = (self.config.sigma2, self.config.rho_end);
        if cap > 0 {
            coordinate_search(&x0, f0, sigma2, rho_end, cap, &mut self.objective(layer))?;
        }
        self.checkpoint(Stage::Two)
    }
}

/// Stage I only.
pub fn run_stage1(config: &TwoStageConfig, problem: Problem<'_>) -> Result<RunRecord, StageError> {
    let mut run = TwoStageRun::new(config, problem).map_err(|source| StageError {
        record: Box::new(empty_record(config.seed)),
        source,
    })?;
    run.stage1()?;
    Ok(run.into_record())
}

/// Stage II starting from `stage1`'s best configuration.
pub fn run_stage2(config: &TwoStageConfig, problem: Problem<'_>, stage1: RunRecord) -> Result<RunRecord, StageError> {
    let mut run = TwoStageRun::resume(config, problem, stage1.clone()).map_err(|source| StageError {
        record: Box::new(stage1),
        source,
    })?;
    run.stage2()?;
    Ok(run.into_record())
}

/// Stage I then stage II.
pub fn run_two_stage(config: &TwoStageConfig, problem: Problem<'_>) -> Result<RunRecord, StageError> {
    let mut run = TwoStageRun::new(config, problem).map_err(|source| StageError {
        record: Box::new(empty_record(config.seed)),
        source,
    })?;
    run.stage1()?;
    run.stage2()?;
    Ok(run.into_record())
}

fn empty_record(seed: u64) -> RunRecord {
    RunRecord {
        seed,
        rows: Vec::new(),
        readings: Vec::new(),
        best_train: Vec::new(),
        best_train_loss: f64::INFINITY,
        selected: Vec::new(),
        selected_reading: None,
        stage1_calls: 0,
        stage2_calls: 0,
        fallback_layers: Vec::new(),
    }
}
