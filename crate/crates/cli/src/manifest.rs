//! Per-run JSON record: what was run, with which configuration, what it
//! wrote and how it ended.

use std::path::{Path, PathBuf};

use mimq_core::config::Config;
use mimq_core::data::metrics::EvalResult;
use serde::Serialize;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub config: serde_json::Value,
    pub config_hash: String,
    /// Files written by the run that exist when it ends.
    pub outputs: Vec<PathBuf>,
    pub wall_clock_secs: f64,
    pub exit_code: u8,
    pub error: Option<String>,
    pub final_metrics: Vec<EvalResult>,
}

impl RunManifest {
    pub fn new(config: &Config) -> Self {
        RunManifest {
            command: std::env::args().collect(),
            config: serde_json::to_value(config).expect("config serializes"),
            config_hash: config.hash(),
            outputs: Vec::new(),
            wall_clock_secs: 0.0,
            exit_code: 0,
            error: None,
            final_metrics: Vec::new(),
        }
    }

    pub fn output(&mut self, path: &Path) {
        if path.exists() {
            self.outputs.push(path.to_path_buf());
        }
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, json + "\n")
    }
}

/// `dir/stem.<suffix>` next to a checkpoint path `dir/stem.ext`.
pub fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
    out.with_file_name(format!("{stem}.{suffix}"))
}
