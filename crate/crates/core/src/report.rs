//! Aggregation of per-seed run directories into a summary table and
//! call-aligned curves.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::pipeline::{CALLS_FILE, MANIFEST_FILE};

#[derive(Debug, Clone, PartialEq)]
pub struct SeedSummary {
    pub seed: u64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub val_f1: f64,
    pub calls: u64,
}

/// One row of `calls.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub call: u64,
    pub stage: u8,
    pub train_loss: f64,
    pub best_train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub dir: PathBuf,
    pub summary: SeedSummary,
    pub curve: Vec<CurvePoint>,
}

#[derive(Deserialize)]
struct ManifestView {
    seed: u64,
    calls: CallsView,
    #[serde(rename = "final")]
    outcome: FinalView,
}

#[derive(Deserialize)]
struct CallsView {
    train: u64,
}

#[derive(Deserialize)]
struct FinalView {
    train_loss: f64,
    val_loss: Option<f64>,
    val_accuracy: Option<f64>,
    val_f1: Option<f64>,
}

fn format_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Format(format!("{}: {msg}", path.display()))
}

pub fn parse_calls_csv(path: &Path, text: &str) -> Result<Vec<CurvePoint>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.starts_with("call,stage,layer,train_loss,best_train_loss") => {}
        _ => return Err(format_err(path, "missing calls.csv header")),
    }
    let opt = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|e| format_err(path, e))
        }
    };
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(format_err(path, format!("expected 7 columns in `{line}`")));
            }
            Ok(CurvePoint {
                call: f[0].parse().map_err(|e| format_err(path, e))?,
                stage: f[1].parse().map_err(|e| format_err(path, e))?,
                train_loss: f[3].parse().map_err(|e| format_err(path, e))?,
                best_train_loss: f[4].parse().map_err(|e| format_err(path, e))?,
                val_loss: opt(f[5])?,
                val_accuracy: opt(f[6])?,
            })
        })
        .collect()
}

/// Loads every `seed-*` directory below `dir` that holds a manifest, ordered
/// by seed.
pub fn load_runs(dir: &Path) -> Result<Vec<SeedRun>> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", dir.display()))))?;
    let mut runs = Vec::new();
    for entry in entries {
        let path = entry?.path();
        let is_seed_dir = path.is_dir()
            && path
                .file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("seed-"));
        let manifest_path = path.join(MANIFEST_FILE);
        if !is_seed_dir || !manifest_path.is_file() {
            continue;
        }
        let manifest: ManifestView = serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)
            .map_err(|e| format_err(&manifest_path, e))?;
        let calls_path = path.join(CALLS_FILE);
        let curve = parse_calls_csv(&calls_path, &std::fs::read_to_string(&calls_path)?)?;
        let o = manifest.outcome;
        runs.push(SeedRun {
            summary: SeedSummary {
                seed: manifest.seed,
                train_loss: o.train_loss,
                val_loss: o.val_loss.unwrap_or(f64::NAN),
                val_accuracy: o.val_accuracy.unwrap_or(f64::NAN),
                val_f1: o.val_f1.unwrap_or(f64::NAN),
                calls: manifest.calls.train,
            },
            curve,
            dir: path,
        });
    }
    if runs.is_empty() {
        return Err(Error::Format(format!("no completed seed runs under {}", dir.display())));
    }
    runs.sort_by_key(|r| r.summary.seed);
    Ok(runs)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn format_pm(values: &[f64]) -> String {
    let (m, s) = mean_std(values);
    format!("{m:.2} ± {s:.2}")
}

pub fn summary_table(runs: &[SeedRun]) -> String {
    let col = |f: fn(&SeedSummary) -> f64| runs.iter().map(|r| f(&r.summary)).collect::<Vec<_>>();
    let mut out = String::new();
    let seeds: Vec<String> = runs.iter().map(|r| r.summary.seed.to_string()).collect();
    writeln!(out, "seeds: {}", seeds.join(", ")).unwrap();
    writeln!(out, "{:<14} mean ± std", "metric").unwrap();
    for (name, values) in [
        ("val_accuracy", col(|s| s.val_accuracy)),
        ("val_f1", col(|s| s.val_f1)),
        ("val_loss", col(|s| s.val_loss)),
        ("train_loss", col(|s| s.train_loss)),
    ] {
        writeln!(out, "{name:<14} {}", format_pm(&values)).unwrap();
    }
    out
}

/// One row per oracle call index; each seed contributes four columns and
/// runs shorter than the longest leave their cells empty.
pub fn write_curves<W: std::io::Write>(mut out: W, runs: &[SeedRun]) -> std::io::Result<()> {
    let mut header = vec!["call".to_string()];
    for r in runs {
        let s = r.summary.seed;
        header.extend([
            format!("seed{s}_train_loss"),
            format!("seed{s}_best_train_loss"),
            format!("seed{s}_val_loss"),
            format!("seed{s}_val_accuracy"),
        ]);
    }
    writeln!(out, "{}", header.join(","))?;
    let longest = runs.iter().map(|r| r.curve.len()).max().unwrap_or(0);
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for i in 0..longest {
        let mut row = vec![(i + 1).to_string()];
        for r in runs {
            match r.curve.get(i) {
                Some(p) => row.extend([
                    p.train_loss.to_string(),
                    p.best_train_loss.to_string(),
                    opt(p.val_loss),
                    opt(p.val_accuracy),
                ]),
                None => row.extend(std::iter::repeat_n(String::new(), 4)),
            }
        }
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn population_std_two_decimals() {
        assert_eq!(format_pm(&[0.90, 0.91, 0.92]), "0.91 ± 0.01");
        assert_eq!(format_pm(&[0.5]), "0.50 ± 0.00");
    }

    #[test]
    fn parses_calls_csv() {
        let text = "call,stage,layer,train_loss,best_train_loss,val_loss,val_accuracy\n1,1,0,0.5,0.5,,\n2,1,0,0.4,0.4,0.6,0.75\n";
        let rows = parse_calls_csv(Path::new("x"), text).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].val_accuracy, Some(0.75));
        assert!(parse_calls_csv(Path::new("x"), "nope\n").is_err());
    }
}
