use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::sha256_hex;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Succeeded,
    Failed,
}

/// Provenance record for one command. Written before any work starts and
/// rewritten on exit, including error exits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command_line: Vec<String>,
    /// Resolved configuration snapshot, TOML.
    pub config: String,
    pub vocab_hash: Option<String>,
    /// Input file path to hex SHA-256 of its bytes.
    pub data_hashes: BTreeMap<String, String>,
    pub seed: u64,
    pub toolkit_version: String,
    pub deterministic: bool,
    /// Seconds since the Unix epoch.
    pub started_at: u64,
    pub finished_at: Option<u64>,
    pub status: RunStatus,
    pub error: Option<String>,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Run id derived from everything that determines the outputs, so that
/// repeating a command reproduces its artifacts byte for byte. Inputs are
/// identified by content in a fixed order, not by path.
pub fn derive_run_id(
    command: &str,
    config: &str,
    vocab_hash: Option<&str>,
    input_hashes: &[String],
) -> String {
    let mut text = format!("{command}\n{config}\n{}\n", vocab_hash.unwrap_or(""));
    for h in input_hashes {
        text.push_str(h);
        text.push('\n');
    }
    format!("{command}-{}", &sha256_hex(text.as_bytes())[..12])
}

impl RunManifest {
    pub fn new(run_id: String, config: String, seed: u64, deterministic: bool) -> Self {
        Self {
            run_id,
            command_line: std::env::args().collect(),
            config,
            vocab_hash: None,
            data_hashes: BTreeMap::new(),
            seed,
            toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
            deterministic,
            started_at: now(),
            finished_at: None,
            status: RunStatus::Running,
            error: None,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Records the outcome and rewrites the manifest.
    pub fn finalize<T>(&mut self, dir: &Path, outcome: &Result<T>) -> Result<()> {
        self.finished_at = Some(now());
        match outcome {
            Ok(_) => self.status = RunStatus::Succeeded,
            Err(e) => {
                self.status = RunStatus::Failed;
                self.error = Some(e.to_string());
            }
        }
        self.save(dir).map(|_| ())
    }
}
