use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde_json::json;

use crate::config::RunConfig;

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Records wall-clock times for a command. Timestamps live only in
/// `run.meta` so every other output is reproducible byte for byte.
pub struct RunMeta {
    command: &'static str,
    started: f64,
}

impl RunMeta {
    pub fn start(command: &'static str) -> Self {
        Self {
            command,
            started: unix_now(),
        }
    }

    /// Writes `config.json` and `run.meta` into `dir`.
    pub fn finish(self, dir: &Path, cfg: &RunConfig) -> Result<()> {
        cfg.write_resolved(dir)?;
        let finished = unix_now();
        let meta = json!({
            "command": self.command,
            "version": env!("CARGO_PKG_VERSION"),
            "started_unix": self.started,
            "finished_unix": finished,
            "elapsed_seconds": finished - self.started,
        });
        write(&dir.join("run.meta"), serde_json::to_string_pretty(&meta)? + "\n")
    }
}
