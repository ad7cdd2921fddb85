use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use gated_res2net::config::KvMap;
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";

/// `DIR/manifest.json` for directory outputs, `FILE.manifest.json` otherwise.
pub fn manifest_path(output: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        output.join(MANIFEST_FILE)
    } else {
        let mut name = output.file_name().unwrap_or_default().to_os_string();
        name.push(".");
        name.push(MANIFEST_FILE);
        output.with_file_name(name)
    }
}

/// Record of one artifact-producing run. Replaying `argv` with `config` as
/// the highest-precedence layer reproduces the primary outputs.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    /// Resolved configuration with every default materialized.
    pub config: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub started_unix: f64,
    pub finished_unix: f64,
    /// Summary values produced by the run.
    pub results: BTreeMap<String, String>,
}

pub fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

impl RunManifest {
    pub fn new(command: &str, argv: &[String], config: &KvMap, seed: Option<u64>, started: f64) -> Self {
        Self {
            command: command.to_string(),
            argv: argv.to_vec(),
            config: config.keys().map(|k| (k.to_string(), config.get(k).unwrap().to_string())).collect(),
            seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix: started,
            finished_unix: started,
            results: BTreeMap::new(),
        }
    }

    pub fn result(mut self, key: &str, value: impl ToString) -> Self {
        self.results.insert(key.to_string(), value.to_string());
        self
    }

    pub fn config_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        for (k, v) in &self.config {
            kv.set(k, v);
        }
        kv
    }

    pub fn write(mut self, path: &Path) -> std::io::Result<()> {
        self.finished_unix = now();
        let text = serde_json::to_string_pretty(&self).map_err(std::io::Error::other)?;
        std::fs::write(path, text + "\n")
    }

    pub fn read(path: &Path) -> std::io::Result<Self> {
        serde_json::from_str(&std::fs::read_to_string(path)?).map_err(std::io::Error::other)
    }
}
