//! Derivative-free trust-region search with linear models over a simplex.
//!
//! This is the unconstrained core of Powell's COBYLA: `d + 1` interpolation
//! points define a linear model of the objective; each step either moves to
//! the model minimizer on the trust-region boundary or, when the simplex has
//! degenerated or grown too large relative to `rho`, replaces one vertex
//! along the normal of the opposite face. Every step costs exactly one
//! objective evaluation.
//!
//! [`coordinate_search`] is the budget-starved fallback: one evaluation per
//! direction probe, usable with any positive call cap.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{invalid, Result};

/// Trust-region contraction applied after an unsuccessful model step.
pub const SHRINK: f64 = 0.5;
/// Vertices farther than this many `rho` from the best vertex are replaced.
const MAX_EDGE: f64 = 2.1;
/// Vertices closer than this many `rho` to the opposite face are replaced.
const MIN_HEIGHT: f64 = 0.25;

/// Ordered set of unit search directions.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionSet {
    directions: Vec<Vec<f64>>,
}

impl DirectionSet {
    /// The coordinate axes `e_0 .. e_{d-1}`.
    pub fn coordinate(dim: usize) -> Self {
        let directions = (0..dim)
            .map(|i| {
                let mut e = vec![0.0; dim];
                e[i] = 1.0;
                e
            })
            .collect();
        Self { directions }
    }

    /// Normalizes each vector; zero or non-finite vectors are rejected.
    pub fn new(vectors: Vec<Vec<f64>>) -> Result<Self> {
        let directions = vectors
            .into_iter()
            .map(|v| {
                let n = norm(&v);
                if !(n.is_finite() && n > 0.0) {
                    return Err(invalid("direction must be non-zero and finite"));
                }
                Ok(v.iter().map(|x| x / n).collect())
            })
            .collect::<Result<Vec<Vec<f64>>>>()?;
        Ok(Self { directions })
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.directions.iter().map(Vec::as_slice)
    }
}

/// An evaluated point; `order` is its position in the evaluation sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Vertex {
    pub point: Vec<f64>,
    pub fitness: f64,
    pub order: u64,
}

/// One row of the per-step log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepLog {
    pub eval_count: u64,
    pub rho: f64,
    pub best_f: f64,
}

/// What a step did with its single evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    /// Model step that improved on the best vertex.
    Improved,
    /// Model step that failed; `rho` was contracted (or the search converged).
    Contracted,
    /// Vertex replaced to restore simplex geometry.
    Geometry,
}

#[derive(Debug, Clone)]
pub struct CobylaState {
    simplex: Vec<Vertex>,
    rho: f64,
    rho_end: f64,
    best: Vertex,
    eval_count: u64,
    converged: bool,
}

impl CobylaState {
    /// Evaluates `x0` and `x0 + rho_start·e_i` for every axis.
    pub fn init<F>(x0: &[f64], rho_start: f64, rho_end: f64, objective: &mut F) -> Result<Self>
    where
        F: FnMut(&[f64]) -> Result<f64>,
    {
        validate_radii(rho_start, rho_end)?;
        if x0.is_empty() {
            return Err(invalid("starting point must have dimension >= 1"));
        }
        let mut simplex = Vec::with_capacity(x0.len() + 1);
        let f0 = objective(x0)?;
        simplex.push(Vertex {
            point: x0.to_vec(),
            fitness: f0,
            order: 0,
        });
        for i in 0..x0.len() {
            let mut x = x0.to_vec();
            x[i] += rho_start;
            let f = objective(&x)?;
            simplex.push(Vertex {
                point: x,
                fitness: f,
                order: i as u64 + 1,
            });
        }
        let best = simplex
            .iter()
            .fold(None::<&Vertex>, |acc, v| match acc {
                Some(b) if !(v.fitness < b.fitness) => Some(b),
                _ => Some(v),
            })
            .cloned()
            .expect("simplex is non-empty");
        Ok(Self {
            eval_count: simplex.len() as u64,
            simplex,
            rho: rho_start,
            rho_end,
            best,
            converged: false,
        })
    }

    pub fn dim(&self) -> usize {
        self.best.point.len()
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn rho_end(&self) -> f64 {
        self.rho_end
    }

    pub fn eval_count(&self) -> u64 {
        self.eval_count
    }

    /// Best point seen so far (strict improvements only, so ties keep the earliest).
    pub fn best(&self) -> &Vertex {
        &self.best
    }

    pub fn simplex(&self) -> &[Vertex] {
        &self.simplex
    }

    /// True once a model step fails at `rho == rho_end`.
    pub fn converged(&self) -> bool {
        self.converged
    }

    pub fn log_row(&self) -> StepLog {
        StepLog {
            eval_count: self.eval_count,
            rho: self.rho,
            best_f: self.best.fitness,
        }
    }

    /// Performs one step, consuming exactly one objective evaluation.
    pub fn step<F>(&mut self, objective: &mut F) -> Result<StepKind>
    where
        F: FnMut(&[f64]) -> Result<f64>,
    {
        if self.converged {
            return Err(invalid("search has already converged"));
        }
        let dim = self.dim();
        let b = self.best_vertex();
        let others: Vec<usize> = (0..self.simplex.len()).filter(|&i| i != b).collect();
        let base = DVector::from_column_slice(&self.simplex[b].point);
        let edges = DMatrix::from_fn(dim, dim, |r, c| self.simplex[others[r]].point[c] - base[c]);
        let diffs = DVector::from_fn(dim, |r, _| self.simplex[others[r]].fitness - self.simplex[b].fitness);

        let inverse = edges.clone().try_inverse().filter(|m| m.iter().all(|v| v.is_finite()));
        let gradient = inverse.as_ref().map(|inv| inv * &diffs);

        let lengths: Vec<f64> = (0..dim).map(|r| edges.row(r).norm()).collect();
        let (far, far_len) = argmax(&lengths);

        let replacement = if far_len > MAX_EDGE * self.rho {
            Some((far, face_normal(&edges, inverse.as_ref(), far)))
        } else if let Some(inv) = &inverse {
            let heights: Vec<f64> = (0..dim).map(|c| 1.0 / inv.column(c).norm()).collect();
            let (low, low_h) = argmin(&heights);
            (low_h < MIN_HEIGHT * self.rho).then(|| (low, face_normal(&edges, inverse.as_ref(), low)))
        } else {
            let (row, normal) = degenerate_direction(&edges);
            Some((row, normal))
        };

        if let Some((row, normal)) = replacement {
            let sign = match &gradient {
                Some(g) if g.dot(&normal) > 0.0 => -1.0,
                _ => 1.0,
            };
            let x = &base + normal * (sign * self.rho);
            let vertex = self.evaluate(x.as_slice(), objective)?;
            self.simplex[others[row]] = vertex;
            return Ok(StepKind::Geometry);
        }

        let g = gradient.expect("non-degenerate simplex has a model");
        let gn = g.norm();
        let direction = if gn > 0.0 && gn.is_finite() {
            -g / gn
        } else {
            // flat model: probe against the first edge
            let e = edges.row(0).transpose();
            -&e / e.norm()
        };
        let x = &base + direction * self.rho;
        let trial = self.evaluate(x.as_slice(), objective)?;
        if trial.fitness < self.simplex[b].fitness {
            let worst = self.worst_vertex(b);
            self.simplex[worst] = trial;
            Ok(StepKind::Improved)
        } else {
            if self.rho > self.rho_end {
                self.rho = (self.rho * SHRINK).max(self.rho_end);
            } else {
                self.converged = true;
            }
            Ok(StepKind::Contracted)
        }
    }

    fn evaluate<F>(&mut self, x: &[f64], objective: &mut F) -> Result<Vertex>
    where
        F: FnMut(&[f64]) -> Result<f64>,
    {
        let fitness = objective(x)?;
        let vertex = Vertex {
            point: x.to_vec(),
            fitness,
            order: self.eval_count,
        };
        self.eval_count += 1;
        if fitness < self.best.fitness {
            self.best = vertex.clone();
        }
        Ok(vertex)
    }

    /// Lowest fitness, ties to the earliest evaluation.
    fn best_vertex(&self) -> usize {
        let mut b = 0;
        for (i, v) in self.simplex.iter().enumerate().skip(1) {
            let cur = &self.simplex[b];
            if v.fitness < cur.fitness || (v.fitness == cur.fitness && v.order < cur.order) {
                b = i;
            }
        }
        b
    }

    /// Highest fitness excluding `skip`, ties to the earliest evaluation.
    fn worst_vertex(&self, skip: usize) -> usize {
        let mut w = None::<usize>;
        for (i, v) in self.simplex.iter().enumerate() {
            if i == skip {
                continue;
            }
            w = match w {
                None => Some(i),
                Some(j) => {
                    let cur = &self.simplex[j];
                    let nan_worse = v.fitness.is_nan() && !cur.fitness.is_nan();
                    if nan_worse || v.fitness > cur.fitness || (v.fitness == cur.fitness && v.order < cur.order) {
                        Some(i)
                    } else {
                        Some(j)
                    }
                }
            };
        }
        w.expect("simplex has at least two vertices")
    }
}

fn validate_radii(rho_start: f64, rho_end: f64) -> Result<()> {
    if !(rho_end.is_finite() && rho_end > 0.0 && rho_start.is_finite() && rho_start >= rho_end) {
        return Err(invalid(format!(
            "trust-region radii must satisfy rho_start >= rho_end > 0, got {rho_start} and {rho_end}"
        )));
    }
    Ok(())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn argmax(v: &[f64]) -> (usize, f64) {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc })
}

fn argmin(v: &[f64]) -> (usize, f64) {
    v.iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &x)| if x < acc.1 { (i, x) } else { acc })
}

/// Unit normal of the face spanned by every edge except `row`.
fn face_normal(edges: &DMatrix<f64>, inverse: Option<&DMatrix<f64>>, row: usize) -> DVector<f64> {
    if let Some(inv) = inverse {
        let c = inv.column(row).into_owned();
        let n = c.norm();
        if n.is_finite() && n > 0.0 {
            return c / n;
        }
    }
    let mut reduced = edges.clone();
    reduced.row_mut(row).fill(0.0);
    smallest_right_singular(&reduced)
}

/// For a singular edge matrix: the row taking part in the dependency and a
/// direction orthogonal to the span of the edges.
fn degenerate_direction(edges: &DMatrix<f64>) -> (usize, DVector<f64>) {
    let svd = edges.clone().svd(true, true);
    let k = argmin(svd.singular_values.as_slice()).0;
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let left = u.column(k);
    let row = argmax(&left.iter().map(|x| x.abs()).collect::<Vec<_>>()).0;
    (row, v_t.row(k).transpose())
}

fn smallest_right_singular(m: &DMatrix<f64>) -> DVector<f64> {
    let svd = m.clone().svd(false, true);
    let k = argmin(svd.singular_values.as_slice()).0;
    svd.v_t.expect("requested V^T").row(k).transpose()
}

/// Outcome of a budgeted search.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub point: Vec<f64>,
    pub fitness: f64,
    pub evals_used: u64,
    pub log: Vec<StepLog>,
}

/// Runs the trust-region search with a hard cap of `budget` evaluations,
/// counting the `d + 1` initialization calls.
pub fn cobyla_run<F>(
    x0: &[f64],
    rho_start: f64,
    rho_end: f64,
    budget: u64,
    mut objective: F,
) -> Result<SearchResult>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    validate_radii(rho_start, rho_end)?;
    let need = x0.len() as u64 + 1;
    if budget < need {
        return Err(invalid(format!(
            "budget {budget} is below the {need} evaluations needed to build the simplex"
        )));
    }
    let mut state = CobylaState::init(x0, rho_start, rho_end, &mut objective)?;
    let mut log = vec![state.log_row()];
    while state.eval_count() < budget && !state.converged() {
        state.step(&mut objective)?;
        log.push(state.log_row());
    }
    let best = state.best().clone();
    Ok(SearchResult {
        point: best.point,
        fitness: best.fitness,
        evals_used: state.eval_count(),
        log,
    })
}

/// Coordinate line search: probes `x ± step·u` along each direction, keeping
/// any improvement, and halves `step` after a sweep without one. `f0` is the
/// known fitness of `x0`, so every evaluation is a probe.
pub fn coordinate_search<F>(
    x0: &[f64],
    f0: f64,
    step: f64,
    step_end: f64,
    cap: u64,
    mut objective: F,
) -> Result<SearchResult>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    validate_radii(step, step_end)?;
    let directions = DirectionSet::coordinate(x0.len());
    let mut x = x0.to_vec();
    let mut fx = f0;
    let mut step = step;
    let mut used = 0u64;
    let mut log = Vec::new();
    'outer: while used < cap {
        let mut improved = false;
        for u in directions.iter() {
            for sign in [1.0, -1.0] {
                if used >= cap {
                    break 'outer;
                }
                let probe: Vec<f64> = x.iter().zip(u).map(|(a, b)| a + sign * step * b).collect();
                let f = objective(&probe)?;
                used += 1;
                let better = f < fx;
                if better {
                    x = probe;
                    fx = f;
                    improved = true;
                }
                log.push(StepLog {
                    eval_count: used,
                    rho: step,
                    best_f: fx,
                });
                if better {
                    break;
                }
            }
        }
        if !improved {
            if step <= step_end {
                break;
            }
            step = (step * SHRINK).max(step_end);
        }
    }
    Ok(SearchResult {
        point: x,
        fitness: fx,
        evals_used: used,
        log,
    })
}

/// Writes `eval_count,rho,best_f` rows.
pub fn write_step_csv<W: Write>(mut out: W, rows: &[StepLog]) -> std::io::Result<()> {
    writeln!(out, "eval_count,rho,best_f")?;
    for r in rows {
        writeln!(out, "{},{:e},{:e}", r.eval_count, r.rho, r.best_f)?;
    }
    Ok(())
}
