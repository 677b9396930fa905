//! Optimizer convergence on standard test functions.

use std::io::Write;

use crate::cmaes::CmaEsState;
use crate::cobyla::CobylaState;
use crate::error::{invalid, Result};

pub const SUITES: [&str; 3] = ["sphere", "rosenbrock", "rastrigin"];

pub fn sphere(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

pub fn rosenbrock(x: &[f64]) -> f64 {
    x.windows(2)
        .map(|w| 100.0 * (w[1] - w[0] * w[0]).powi(2) + (1.0 - w[0]).powi(2))
        .sum()
}

pub fn rastrigin(x: &[f64]) -> f64 {
    10.0 * x.len() as f64
        + x.iter()
            .map(|v| v * v - 10.0 * (2.0 * std::f64::consts::PI * v).cos())
            .sum::<f64>()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub function: &'static str,
    pub dim: usize,
    pub optimizer: &'static str,
    pub evals: u64,
    pub best_f: f64,
}

struct Case {
    function: &'static str,
    f: fn(&[f64]) -> f64,
    dim: usize,
    start: f64,
    sigma0: f64,
    popsize: Option<usize>,
    cma_budget: u64,
    cobyla_budget: u64,
}

fn case(suite: &str) -> Result<Case> {
    Ok(match suite {
        "sphere" => Case {
            function: "sphere",
            f: sphere,
            dim: 10,
            start: 5.0,
            sigma0: 0.5,
            popsize: None,
            cma_budget: 5_000,
            cobyla_budget: 2_000,
        },
        "rosenbrock" => Case {
            function: "rosenbrock",
            f: rosenbrock,
            dim: 5,
            start: 0.0,
            sigma0: 0.5,
            popsize: None,
            cma_budget: 30_000,
            cobyla_budget: 5_000,
        },
        "rastrigin" => Case {
            function: "rastrigin",
            f: rastrigin,
            dim: 10,
            start: 3.0,
            sigma0: 2.0,
            popsize: Some(40),
            cma_budget: 40_000,
            cobyla_budget: 5_000,
        },
        other => {
            return Err(invalid(format!("unknown suite `{other}` (available: {})", SUITES.join(", "))));
        }
    })
}

/// CMA-ES rows (one per generation) followed by simplex-search rows (one
/// per evaluation); `best_f` is the best value seen so far.
pub fn run_suite(suite: &str, seed: u64) -> Result<Vec<BenchRow>> {
    let c = case(suite)?;
    let x0 = vec![c.start; c.dim];
    let mut rows = Vec::new();

    let mut es = CmaEsState::new(x0.clone(), c.sigma0, c.popsize, seed)?;
    let mut best = f64::INFINITY;
    while es.evals() + es.popsize() as u64 <= c.cma_budget && best > 1e-14 {
        let mut gen = es.ask();
        for cand in &mut gen {
            cand.fitness = Some((c.f)(&cand.point));
        }
        let summary = es.tell(&gen)?;
        best = best.min(summary.best_f);
        rows.push(BenchRow {
            function: c.function,
            dim: c.dim,
            optimizer: "cmaes",
            evals: es.evals(),
            best_f: best,
        });
    }

    let mut objective = |x: &[f64]| Ok((c.f)(x));
    let mut state = CobylaState::init(&x0, 1.0, 1e-8, &mut objective)?;
    let push = |rows: &mut Vec<BenchRow>, s: &CobylaState| {
        rows.push(BenchRow {
            function: c.function,
            dim: c.dim,
            optimizer: "cobyla",
            evals: s.eval_count(),
            best_f: s.best().fitness,
        })
    };
    push(&mut rows, &state);
    while state.eval_count() < c.cobyla_budget && !state.converged() {
        state.step(&mut objective)?;
        push(&mut rows, &state);
    }
    Ok(rows)
}

pub fn write_bench_csv<W: Write>(mut out: W, rows: &[BenchRow]) -> std::io::Result<()> {
    writeln!(out, "function,dim,optimizer,evals,best_f")?;
    for r in rows {
        writeln!(out, "{},{},{},{},{:e}", r.function, r.dim, r.optimizer, r.evals, r.best_f)?;
    }
    Ok(())
}
