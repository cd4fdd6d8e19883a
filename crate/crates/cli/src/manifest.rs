use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Record of one invocation, written beside its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// The parsed arguments as JSON.
    pub config: String,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: u64,
    pub tool_version: String,
    pub duration_seconds: f64,
}

impl RunManifest {
    pub fn new<C: Serialize>(command: &str, config: &C, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            config: serde_json::to_string(config).unwrap_or_default(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            duration_seconds: 0.0,
        }
    }

    pub fn finish(mut self, started: Instant, path: &Path) -> Result<()> {
        self.duration_seconds = started.elapsed().as_secs_f64();
        std::fs::write(path, serde_json::to_string_pretty(&self)?).map_err(|e| crate::error::CliError::from(e).at(path))
    }
}

/// `model.ckpt` gets `model.ckpt.manifest.json`.
pub fn beside(file: &Path) -> PathBuf {
    let mut name = file.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    file.with_file_name(name)
}
