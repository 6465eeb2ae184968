//! Grid runs over alpha values or prior kinds, several seeds per cell, with
//! a resumable manifest and a mean/std table per sweep.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{bail, Result};
use dap_lab::datagen::Bundle;
use dap_lab::io::{self, KeyValues};
use dap_lab::trainer::TrainConfig;

use crate::commands::{build_config, prior_kind, train_into};
use crate::manifest::RunManifest;
use crate::SweepArgs;

pub const SWEEP_MANIFEST: &str = "sweep_manifest.txt";
pub const THREADS_ENV: &str = "DAP_LAB_THREADS";

/// One grid value with its per-seed outcomes.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub mean: f64,
    /// Sample standard deviation over successful seeds (0 for a single seed).
    pub std: f64,
    pub ok: usize,
    pub failed: usize,
}

#[derive(Clone, Debug)]
pub struct SweepTable {
    pub parameter: String,
    pub rows: Vec<SweepRow>,
    pub path: PathBuf,
    /// Cells actually trained by this invocation (the rest were resumed).
    pub trained: usize,
}

impl SweepTable {
    pub fn failed_cells(&self) -> usize {
        self.rows.iter().map(|r| r.failed).sum()
    }
}

/// Worker count: `DAP_LAB_THREADS` if set, otherwise the available cores.
pub fn worker_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

struct Cell {
    value: String,
    seed: u64,
    config: TrainConfig,
}

impl Cell {
    fn key(&self, parameter: &str) -> String {
        cell_key(parameter, &self.value, self.seed)
    }

    fn dir(&self, root: &Path, parameter: &str) -> PathBuf {
        root.join("cells").join(format!("{parameter}={}", self.value)).join(format!("seed{}", self.seed))
    }
}

/// Status key of one cell in the sweep manifest. Keys never contain `=`,
/// which separates keys from values in the manifest.
fn cell_key(parameter: &str, value: &str, seed: u64) -> String {
    format!("cell.{parameter}.{value}.seed{seed}")
}

fn status_line(result: &Result<f64>) -> String {
    match result {
        Ok(miou) => format!("ok {miou}"),
        Err(e) => format!("failed {}", format!("{e:#}").replace(['\n', '#', '='], " ")),
    }
}

fn parse_status(value: &str) -> Option<f64> {
    value.strip_prefix("ok ").and_then(|v| v.parse().ok())
}

pub fn cmd_sweep(args: &SweepArgs, recorded: &[String]) -> Result<SweepTable> {
    let base = build_config(&args.flags, None, None, None)?;
    let (parameter, values): (&str, Vec<(String, TrainConfig)>) = if !args.alphas.is_empty() {
        ("alpha", args.alphas.iter().map(|&a| (a.to_string(), TrainConfig { alpha: a, ..base.clone() })).collect())
    } else if !args.priors.is_empty() {
        let cells = args
            .priors
            .iter()
            .map(|&p| {
                let kind = prior_kind(p);
                (kind.to_string(), TrainConfig { prior: kind, ..base.clone() })
            })
            .collect();
        ("prior", cells)
    } else {
        bail!("sweep needs --alphas or --priors");
    };
    if args.seeds == 0 {
        bail!("sweep needs at least one seed");
    }
    for (_, c) in &values {
        c.validate()?;
    }

    let mut manifest = RunManifest::new("sweep", recorded);
    manifest.begin("load");
    let bundle = Bundle::load(&args.data)?;
    let checksum = bundle.checksum();
    manifest.dataset_checksum = Some(checksum.clone());
    manifest.seeds = (0..args.seeds).collect();
    manifest.config = base.to_kv();

    let sweep_path = args.out.join(SWEEP_MANIFEST);
    let previous = if sweep_path.exists() { KeyValues::load(&sweep_path)? } else { KeyValues::new() };
    if let Some(old) = previous.get("dataset.checksum") {
        if old != checksum {
            bail!("{} was produced on a different dataset", sweep_path.display());
        }
    }
    let cells: Vec<Cell> = values
        .iter()
        .flat_map(|(v, c)| (0..args.seeds).map(move |seed| Cell { value: v.clone(), seed, config: TrainConfig { seed, ..c.clone() } }))
        .collect();

    let mut status = KeyValues::new();
    status.push("parameter", parameter);
    status.push("dataset.checksum", &checksum);
    for cell in &cells {
        if let Some(v) = previous.get(&cell.key(parameter)).filter(|v| parse_status(v).is_some()) {
            status.push(cell.key(parameter), v);
        }
    }
    let pending: Vec<&Cell> = cells.iter().filter(|c| status.get(&c.key(parameter)).is_none()).collect();
    status.save(&sweep_path)?;

    manifest.begin("train");
    let status = Mutex::new(status);
    let next = AtomicUsize::new(0);
    let workers = worker_count().min(pending.len()).max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cell) = pending.get(i) else { break };
                let dir = cell.dir(&args.out, parameter);
                let result = train_into(&cell.config, &bundle, &dir, false, None, recorded).and_then(|s| {
                    s.metrics.map(|m| m.miou).ok_or_else(|| anyhow::anyhow!("run finished without evaluation"))
                });
                let line = status_line(&result);
                eprintln!("{parameter}={} seed {}: {line}", cell.value, cell.seed);
                let mut st = status.lock().expect("status lock");
                st.push(cell.key(parameter), line);
                if let Err(e) = st.save(&sweep_path) {
                    eprintln!("warning: could not update {}: {e}", sweep_path.display());
                }
            });
        }
    });
    let status = status.into_inner().expect("status lock");

    let mut rows = Vec::new();
    for (value, _) in &values {
        let results: Vec<Option<f64>> = (0..args.seeds)
            .map(|seed| status.get(&cell_key(parameter, value, seed)).and_then(parse_status))
            .collect();
        let ok: Vec<f64> = results.iter().flatten().copied().collect();
        let (mean, std) = mean_std(&ok);
        rows.push(SweepRow { value: value.clone(), mean, std, ok: ok.len(), failed: results.len() - ok.len() });
    }
    let mut csv = format!("{parameter},mean_miou,std_miou,mean_pm_std,n_ok,n_failed\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{:.6},{:.6},{:.4}±{:.4},{},{}", r.value, r.mean, r.std, r.mean, r.std, r.ok, r.failed);
    }
    let table_path = args.out.join(format!("sweep_{parameter}.csv"));
    io::write_bytes(&table_path, csv.as_bytes())?;
    print!("{csv}");

    manifest.artifacts = vec![table_path.clone(), sweep_path];
    for cell in &cells {
        let dir = cell.dir(&args.out, parameter);
        for f in [dap_lab::trainer::STUDENT_CKPT, dap_lab::trainer::METRICS_FILE, dap_lab::trainer::EVAL_FILE] {
            if dir.join(f).exists() {
                manifest.artifacts.push(dir.join(f));
            }
        }
    }
    manifest.write(&args.out)?;
    Ok(SweepTable { parameter: parameter.to_string(), rows, path: table_path, trained: pending.len() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_of_known_values() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-12);
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }

    #[test]
    fn status_round_trip() {
        assert_eq!(parse_status(&status_line(&Ok(0.25))), Some(0.25));
        assert_eq!(parse_status(&status_line(&Err(anyhow::anyhow!("x = #1\nboom")))), None);
    }
}
