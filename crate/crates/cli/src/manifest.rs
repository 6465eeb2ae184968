//! Run manifests: what was run, on which data, what it produced.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use dap_lab::io::{self, KeyValues};

pub const RUN_MANIFEST: &str = "run_manifest.txt";

/// Record of one command invocation. Every artifact is listed with its
/// sha256 so a replay can be checked byte for byte.
#[derive(Debug)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: KeyValues,
    pub dataset_checksum: Option<String>,
    pub seeds: Vec<u64>,
    pub artifacts: Vec<PathBuf>,
    pub phases: Vec<(String, f64)>,
    started: Option<(String, Instant)>,
}

impl RunManifest {
    pub fn new(command: &str, args: &[String]) -> Self {
        Self {
            command: command.to_string(),
            args: args.to_vec(),
            config: KeyValues::new(),
            dataset_checksum: None,
            seeds: Vec::new(),
            artifacts: Vec::new(),
            phases: Vec::new(),
            started: None,
        }
    }

    pub fn begin(&mut self, phase: &str) {
        self.end();
        self.started = Some((phase.to_string(), Instant::now()));
    }

    pub fn end(&mut self) {
        if let Some((name, t0)) = self.started.take() {
            self.phases.push((name, t0.elapsed().as_secs_f64()));
        }
    }

    /// Writes `run_manifest.txt` under `root`; artifact paths are stored
    /// relative to it.
    pub fn write(&mut self, root: &Path) -> Result<PathBuf> {
        self.end();
        let mut kv = KeyValues::new();
        kv.push("command", &self.command);
        for (i, a) in self.args.iter().enumerate() {
            kv.push(format!("arg.{i}"), a);
        }
        if let Some(c) = &self.dataset_checksum {
            kv.push("dataset.checksum", c);
        }
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        kv.push("seeds", seeds.join(","));
        for (k, v) in self.config.entries() {
            kv.push(format!("config.{k}"), v);
        }
        let mut artifacts = self.artifacts.clone();
        artifacts.sort();
        artifacts.dedup();
        for path in &artifacts {
            let rel = path.strip_prefix(root).unwrap_or(path);
            let sum = io::sha256_file(path).with_context(|| format!("hashing {}", path.display()))?;
            kv.push(format!("artifact.{}", rel.display()), sum);
        }
        for (name, secs) in &self.phases {
            kv.push(format!("wall_clock.{name}"), format!("{secs:.3}"));
        }
        let path = root.join(RUN_MANIFEST);
        kv.save(&path)?;
        Ok(path)
    }
}

/// Recorded argument vector of a manifest.
pub fn recorded_args(kv: &KeyValues) -> Vec<String> {
    (0..).map_while(|i| kv.get(&format!("arg.{i}")).map(str::to_string)).collect()
}

/// `(relative path, sha256)` pairs of a manifest.
pub fn recorded_artifacts(kv: &KeyValues) -> Vec<(String, String)> {
    kv.with_prefix("artifact.").map(|(k, v)| (k["artifact.".len()..].to_string(), v.to_string())).collect()
}
