//! Covariance Matrix Adaptation Evolution Strategy with an ask/tell interface.
//!
//! Constants follow Hansen's tutorial defaults: log-decreasing recombination
//! weights over the `μ = ⌊λ/2⌋` best, cumulative step-size adaptation, and a
//! rank-one plus rank-μ covariance update. The covariance is re-decomposed
//! after every generation.

use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{invalid, Error, Result};

/// Eigenvalues of `C` are floored here after every update.
pub const EIGEN_FLOOR: f64 = 1e-20;

/// Default population size `4 + ⌊3·ln d⌋`.
pub fn default_popsize(dim: usize) -> usize {
    4 + (3.0 * (dim.max(1) as f64).ln()).floor() as usize
}

/// A sampled point, optionally carrying its (lower-is-better) fitness.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub point: Vec<f64>,
    pub fitness: Option<f64>,
}

impl Candidate {
    pub fn new(point: Vec<f64>) -> Self {
        Self {
            point,
            fitness: None,
        }
    }

    pub fn evaluated(point: Vec<f64>, fitness: f64) -> Self {
        Self {
            point,
            fitness: Some(fitness),
        }
    }
}

/// Strategy constants derived from `(d, λ)`.
#[derive(Debug, Clone)]
struct Params {
    mu: usize,
    weights: Vec<f64>,
    mu_eff: f64,
    c_sigma: f64,
    d_sigma: f64,
    c_c: f64,
    c_1: f64,
    c_mu: f64,
    chi_n: f64,
}

impl Params {
    fn new(dim: usize, popsize: usize) -> Self {
        let n = dim as f64;
        let mu = popsize / 2;
        let raw: Vec<f64> = (1..=mu)
            .map(|i| (mu as f64 + 0.5).ln() - (i as f64).ln())
            .collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();

        let c_sigma = (mu_eff + 2.0) / (n + mu_eff + 5.0);
        let d_sigma = 1.0 + 2.0 * (((mu_eff - 1.0) / (n + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
        let c_c = (4.0 + mu_eff / n) / (n + 4.0 + 2.0 * mu_eff / n);
        let c_1 = 2.0 / ((n + 1.3).powi(2) + mu_eff);
        let c_mu = (1.0 - c_1).min(2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((n + 2.0).powi(2) + mu_eff));
        let chi_n = n.sqrt() * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n));
        Self {
            mu,
            weights,
            mu_eff,
            c_sigma,
            d_sigma,
            c_c,
            c_1,
            c_mu,
            chi_n,
        }
    }
}

/// Summary of one completed generation, also the CSV log row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GenerationSummary {
    pub generation: u64,
    pub evals: u64,
    pub best_f: f64,
    pub mean_f: f64,
    pub step_size: f64,
}

#[derive(Debug, Clone)]
pub struct CmaEsState {
    mean: DVector<f64>,
    step_size: f64,
    covariance: DMatrix<f64>,
    /// Eigenvectors of `C` (columns).
    basis: DMatrix<f64>,
    /// Square roots of the eigenvalues of `C`.
    scales: DVector<f64>,
    path_sigma: DVector<f64>,
    path_c: DVector<f64>,
    popsize: usize,
    generation: u64,
    evals: u64,
    rng_seed: u64,
    rng: ChaCha8Rng,
    params: Params,
    best: Option<Candidate>,
}

impl CmaEsState {
    /// Starts a fresh strategy at `mean` with `C = I` and zero evolution paths.
    ///
    /// `popsize = None` selects [`default_popsize`].
    pub fn new(mean: Vec<f64>, sigma0: f64, popsize: Option<usize>, seed: u64) -> Result<Self> {
        let dim = mean.len();
        if dim == 0 {
            return Err(invalid("CMA-ES dimension must be >= 1"));
        }
        if !(sigma0.is_finite() && sigma0 > 0.0) {
            return Err(invalid(format!("initial step size must be positive, got {sigma0}")));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(invalid("initial mean must be finite"));
        }
        let popsize = popsize.unwrap_or_else(|| default_popsize(dim));
        if popsize < 2 {
            return Err(invalid(format!("population size must be >= 2, got {popsize}")));
        }
        Ok(Self {
            mean: DVector::from_vec(mean),
            step_size: sigma0,
            covariance: DMatrix::identity(dim, dim),
            basis: DMatrix::identity(dim, dim),
            scales: DVector::from_element(dim, 1.0),
            path_sigma: DVector::zeros(dim),
            path_c: DVector::zeros(dim),
            popsize,
            generation: 0,
            evals: 0,
            rng_seed: seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: Params::new(dim, popsize),
            best: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn popsize(&self) -> usize {
        self.popsize
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Number of fitness values told so far.
    pub fn evals(&self) -> u64 {
        self.evals
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    pub fn step_size(&self) -> f64 {
        self.step_size
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn path_sigma(&self) -> &[f64] {
        self.path_sigma.as_slice()
    }

    pub fn path_c(&self) -> &[f64] {
        self.path_c.as_slice()
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    /// Samples `λ` points from `N(m, δ²C)`.
    pub fn ask(&mut self) -> Vec<Candidate> {
        let dim = self.dim();
        let bd = &self.basis * DMatrix::from_diagonal(&self.scales);
        (0..self.popsize)
            .map(|_| {
                let z = DVector::from_fn(dim, |_, _| StandardNormal.sample(&mut self.rng));
                let y = &bd * z;
                Candidate::new((&self.mean + y * self.step_size).as_slice().to_vec())
            })
            .collect()
    }

    /// Updates mean, paths, step size and covariance from one evaluated generation.
    pub fn tell(&mut self, evaluated: &[Candidate]) -> Result<GenerationSummary> {
        if evaluated.len() != self.popsize {
            return Err(invalid(format!(
                "tell expects {} candidates, got {}",
                self.popsize,
                evaluated.len()
            )));
        }
        let mut fitness = Vec::with_capacity(evaluated.len());
        for (i, c) in evaluated.iter().enumerate() {
            let f = c
                .fitness
                .ok_or_else(|| invalid(format!("candidate {i} has no fitness")))?;
            if c.point.len() != self.dim() {
                return Err(Error::DimensionMismatch {
                    what: "candidate point",
                    expected: self.dim(),
                    actual: c.point.len(),
                });
            }
            fitness.push(f);
        }

        for c in evaluated {
            let f = c.fitness.unwrap_or(f64::INFINITY);
            if self.best.as_ref().is_none_or(|b| f < b.fitness.unwrap_or(f64::INFINITY)) {
                self.best = Some(c.clone());
            }
        }

        // Stable sort keeps evaluation order among equal fitness values.
        let mut order: Vec<usize> = (0..evaluated.len()).collect();
        order.sort_by(|&a, &b| rank_key(fitness[a]).total_cmp(&rank_key(fitness[b])));

        let dim = self.dim();
        let p = &self.params;
        let inv_step = 1.0 / self.step_size;
        let steps: Vec<DVector<f64>> = order[..p.mu]
            .iter()
            .map(|&i| (DVector::from_column_slice(&evaluated[i].point) - &self.mean) * inv_step)
            .collect();
        let mut y_w = DVector::zeros(dim);
        for (w, y) in p.weights.iter().zip(&steps) {
            y_w.axpy(*w, y, 1.0);
        }

        self.mean.axpy(self.step_size, &y_w, 1.0);

        let inv_sqrt_c = {
            let inv_scales = self.scales.map(|s| 1.0 / s);
            &self.basis * DMatrix::from_diagonal(&inv_scales) * self.basis.transpose()
        };
        let cs = p.c_sigma;
        self.path_sigma = &self.path_sigma * (1.0 - cs) + inv_sqrt_c * &y_w * (cs * (2.0 - cs) * p.mu_eff).sqrt();

        self.generation += 1;
        let ps_norm = self.path_sigma.norm();
        let decay = 1.0 - (1.0 - cs).powf(2.0 * self.generation as f64);
        let h_sigma = ps_norm / decay.sqrt() < (1.4 + 2.0 / (dim as f64 + 1.0)) * p.chi_n;
        let h = if h_sigma { 1.0 } else { 0.0 };

        let cc = p.c_c;
        self.path_c = &self.path_c * (1.0 - cc) + &y_w * (h * (cc * (2.0 - cc) * p.mu_eff).sqrt());

        let delta_h = (1.0 - h) * cc * (2.0 - cc);
        let mut rank_mu = DMatrix::zeros(dim, dim);
        for (w, y) in p.weights.iter().zip(&steps) {
            rank_mu.ger(*w, y, y, 1.0);
        }
        let rank_one = &self.path_c * self.path_c.transpose();
        self.covariance = &self.covariance * (1.0 - p.c_1 - p.c_mu)
            + (rank_one + &self.covariance * delta_h) * p.c_1
            + rank_mu * p.c_mu;

        self.step_size *= ((cs / p.d_sigma) * (ps_norm / p.chi_n - 1.0)).exp();
        self.evals += evaluated.len() as u64;
        self.refresh_eigensystem();

        let finite: Vec<f64> = fitness.iter().copied().filter(|f| f.is_finite()).collect();
        let mean_f = if finite.is_empty() {
            f64::NAN
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        };
        Ok(GenerationSummary {
            generation: self.generation,
            evals: self.evals,
            best_f: self.best.as_ref().and_then(|b| b.fitness).unwrap_or(f64::NAN),
            mean_f,
            step_size: self.step_size,
        })
    }

    /// Lowest-fitness candidate ever told; ties keep the earliest one.
    pub fn best(&self) -> Result<&Candidate> {
        self.best.as_ref().ok_or(Error::NoEvaluations)
    }

    fn refresh_eigensystem(&mut self) {
        symmetrize(&mut self.covariance);
        let eig = SymmetricEigen::new(self.covariance.clone());
        let floored = eig.eigenvalues.iter().any(|&v| !(v >= EIGEN_FLOOR));
        let values = eig.eigenvalues.map(|v| if v >= EIGEN_FLOOR { v } else { EIGEN_FLOOR });
        if floored {
            self.covariance = &eig.eigenvectors * DMatrix::from_diagonal(&values) * eig.eigenvectors.transpose();
            symmetrize(&mut self.covariance);
        }
        self.scales = values.map(f64::sqrt);
        self.basis = eig.eigenvectors;
    }
}

fn rank_key(f: f64) -> f64 {
    if f.is_nan() {
        f64::INFINITY
    } else {
        f
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Result of [`minimize`].
#[derive(Debug, Clone)]
pub struct CmaRun {
    pub best: Candidate,
    pub evals: u64,
    pub log: Vec<GenerationSummary>,
}

/// Runs whole generations until `max_evals` would be exceeded or the best
/// fitness falls below `target`.
pub fn minimize<F>(
    mut objective: F,
    m0: Vec<f64>,
    sigma0: f64,
    popsize: Option<usize>,
    seed: u64,
    max_evals: u64,
    target: f64,
) -> Result<CmaRun>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut state = CmaEsState::new(m0, sigma0, popsize, seed)?;
    let mut log = Vec::new();
    while state.evals() + state.popsize() as u64 <= max_evals {
        let mut gen = state.ask();
        for c in &mut gen {
            c.fitness = Some(objective(&c.point));
        }
        let row = state.tell(&gen)?;
        log.push(row);
        if row.best_f < target {
            break;
        }
    }
    Ok(CmaRun {
        best: state.best()?.clone(),
        evals: state.evals(),
        log,
    })
}

/// Writes `generation,evals,best_f,mean_f,step_size` rows.
pub fn write_generation_csv<W: Write>(mut out: W, rows: &[GenerationSummary]) -> std::io::Result<()> {
    writeln!(out, "generation,evals,best_f,mean_f,step_size")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{:e},{:e},{:e}",
            r.generation, r.evals, r.best_f, r.mean_f, r.step_size
        )?;
    }
    Ok(())
}
