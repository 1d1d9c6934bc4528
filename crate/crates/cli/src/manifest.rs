use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const FILE: &str = "run_manifest.json";

/// Written to the output directory before any work starts and rewritten with
/// the end time and artifact list when the command finishes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub seed: Option<u64>,
    pub artifacts: Vec<PathBuf>,
    pub tool_version: String,
    pub started_unix_ms: u128,
    pub finished_unix_ms: Option<u128>,
    #[serde(skip)]
    dir: PathBuf,
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

impl RunManifest {
    pub fn begin(dir: &Path, command: &str, config: Value, seed: Option<u64>) -> Result<Self> {
        let m = Self {
            command: command.to_string(),
            config,
            seed,
            artifacts: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix_ms: now_ms(),
            finished_unix_ms: None,
            dir: dir.to_path_buf(),
        };
        m.write()?;
        Ok(m)
    }

    pub fn add(&mut self, path: impl Into<PathBuf>) {
        self.artifacts.push(path.into());
    }

    pub fn finish(mut self) -> Result<()> {
        self.finished_unix_ms = Some(now_ms());
        self.write()
    }

    fn write(&self) -> Result<()> {
        std::fs::create_dir_all(&self.dir).with_context(|| format!("creating {}", self.dir.display()))?;
        let path = self.dir.join(FILE);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}
