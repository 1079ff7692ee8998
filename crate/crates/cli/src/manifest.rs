use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Index of everything one command wrote into its output directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config_digest: Option<String>,
    pub seeds: Vec<u64>,
    /// Paths relative to the manifest's directory, keyed by seed
    /// (`"shared"` for files not tied to a seed).
    pub outputs: BTreeMap<String, Vec<PathBuf>>,
    /// Wall-clock seconds per stage.
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: &str, config_digest: Option<String>) -> Self {
        Self {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_digest,
            ..Self::default()
        }
    }

    pub fn record(&mut self, key: &str, rel: impl Into<PathBuf>) {
        self.outputs.entry(key.to_string()).or_default().push(rel.into());
    }

    pub fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        *self.timings.entry(stage.to_string()).or_default() += start.elapsed().as_secs_f64();
        out
    }

    pub fn files(&self) -> impl Iterator<Item = &PathBuf> {
        self.outputs.values().flatten()
    }

    pub fn write(&mut self, dir: &Path) -> CliResult<PathBuf> {
        for files in self.outputs.values_mut() {
            files.sort();
            files.dedup();
        }
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(io_err(&path))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| crate::error::CliError::Io(format!("{}: {e}", path.display())))
    }
}
