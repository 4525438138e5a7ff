//! Append-only run manifest, one JSON object per line.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::{json, Value};

use crate::{io_failure, Failure};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

pub struct RunManifest {
    command: &'static str,
    config: Value,
    seed: Option<u64>,
    artifacts: Vec<String>,
    started_ms: u128,
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis())
}

impl RunManifest {
    pub fn start(command: &'static str, config: Value, seed: Option<u64>) -> Self {
        RunManifest {
            command,
            config,
            seed,
            artifacts: Vec::new(),
            started_ms: now_ms(),
        }
    }

    /// Record an artifact by its path relative to the run directory.
    pub fn artifact(&mut self, name: impl Into<String>) {
        self.artifacts.push(name.into());
    }

    pub fn to_json(&self, finished_ms: u128) -> Value {
        json!({
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "artifacts": self.artifacts,
            "version": env!("CARGO_PKG_VERSION"),
            "started_unix_ms": self.started_ms as u64,
            "finished_unix_ms": finished_ms as u64,
        })
    }

    /// Append this run to `dir/manifest.jsonl`.
    pub fn finish(self, dir: &Path) -> Result<PathBuf, Failure> {
        let path = dir.join(MANIFEST_FILE);
        let line = self.to_json(now_ms()).to_string();
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| io_failure(&path, e))?;
        writeln!(f, "{line}").map_err(|e| io_failure(&path, e))?;
        Ok(path)
    }
}

/// Parse every line of a manifest file.
pub fn read(dir: &Path) -> Result<Vec<Value>, Failure> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| io_failure(&path, e))?;
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(|e| Failure::new(crate::EXIT_IO, format!("{}: {e}", path.display()))))
        .collect()
}
