//! Run manifests and atomic JSON output.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Command;
use crate::data::Dataset;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub path: PathBuf,
    pub rows: usize,
    /// SHA-256 over column names and record bit patterns.
    pub fingerprint: String,
}

impl DatasetInfo {
    pub fn of(path: &Path, data: &Dataset) -> Self {
        DatasetInfo {
            path: path.to_path_buf(),
            rows: data.len(),
            fingerprint: data.fingerprint(),
        }
    }
}

/// Everything needed to re-run a command and check its results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Crate name and version that produced the artifacts.
    pub artifact_version: String,
    /// SHA-256 of the serialized command, output location excluded.
    pub config_hash: String,
    pub command: Command,
    pub seeds: Vec<u64>,
    pub datasets: Vec<DatasetInfo>,
    pub outputs: Vec<PathBuf>,
    pub runtime_secs: f64,
    /// Reported results; re-running the command must reproduce them exactly.
    pub metrics: serde_json::Value,
}

pub fn artifact_version() -> String {
    format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

pub fn config_hash(command: &Command) -> String {
    let mut c = command.clone();
    c.relocate(Path::new(""));
    let json = serde_json::to_vec(&c).expect("commands serialize");
    hex::encode(Sha256::digest(&json))
}

/// Writes `bytes` to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::format(path, e))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e))
}

pub fn read_manifest(path: &Path) -> Result<RunManifest> {
    let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    read_json(&path)
}
