use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use hcae::{LabeledDataset, ModelParameters};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST: &str = "manifest.jsonl";

/// Directory layout of one experiment.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub root: PathBuf,
}

/// One line of the append-only workspace manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub unix_time: u64,
    /// SHA-256 of the config sections the stage reads.
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    /// Content hashes of consumed datasets and checkpoints.
    pub inputs: BTreeMap<String, String>,
    /// Content hashes of produced artifacts.
    pub outputs: BTreeMap<String, String>,
}

impl StageRecord {
    pub fn new(stage: &str, config_hash: String) -> Self {
        StageRecord {
            stage: stage.into(),
            unix_time: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            config_hash,
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Workspace { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn ae(&self) -> PathBuf {
        self.root.join("ae")
    }

    pub fn clf(&self) -> PathBuf {
        self.root.join("clf")
    }

    pub fn ensemble(&self) -> PathBuf {
        self.root.join("ensemble")
    }

    pub fn codec(&self) -> PathBuf {
        self.root.join("codec")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join(MANIFEST)
    }

    /// Fails unless `dir` is absent or empty, or `force` is set.
    pub fn check_writable(dir: &Path, force: bool) -> Result<(), CliError> {
        let occupied = match fs::read_dir(dir) {
            Ok(mut entries) => entries.next().is_some(),
            Err(_) => dir.exists(),
        };
        if occupied && !force {
            return Err(CliError::Exists(dir.to_path_buf()));
        }
        Ok(())
    }

    /// Clears and recreates a stage directory. Call after the stage's work succeeded.
    pub fn reset_dir(dir: &Path, force: bool) -> Result<(), CliError> {
        Self::check_writable(dir, force)?;
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
    }

    pub fn require(path: PathBuf, stage: &'static str, what: &'static str) -> Result<PathBuf, CliError> {
        if path.exists() {
            Ok(path)
        } else {
            Err(CliError::Dependency { stage, what, path })
        }
    }

    pub fn load_checkpoint(&self, dir: PathBuf, stage: &'static str, what: &'static str) -> Result<ModelParameters, CliError> {
        Self::require(dir.join("manifest.json"), stage, what)?;
        Ok(ModelParameters::load(&dir)?)
    }

    pub fn append(&self, record: &StageRecord) -> Result<(), CliError> {
        fs::create_dir_all(&self.root).map_err(|e| CliError::io(&self.root, e))?;
        let path = self.manifest();
        let mut file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| CliError::io(&path, e))?;
        let line = serde_json::to_string(record)?;
        writeln!(file, "{line}").map_err(|e| CliError::io(&path, e))
    }

    pub fn records(&self) -> Result<Vec<StageRecord>, CliError> {
        let path = self.manifest();
        if !path.exists() {
            return Ok(Vec::new());
        }
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(CliError::from))
            .collect()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Hash of labels and 8-bit pixels, in sample order.
pub fn dataset_hash(data: &LabeledDataset) -> String {
    let mut h = Sha256::new();
    for s in &data.samples {
        let (height, width, channels) = s.patch.shape();
        for d in [height, width, channels] {
            h.update((d as u64).to_le_bytes());
        }
        h.update([s.label]);
        h.update(s.patch.to_u8());
    }
    format!("{:x}", h.finalize())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}
