//! Run manifests: what a command read, what it wrote, and the content hashes
//! tying them together. No timestamps, so reruns produce identical files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub tool: String,
    pub tool_version: String,
    pub command: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub inputs: Vec<FileEntry>,
    pub outputs: Vec<FileEntry>,
    /// `complete`, or `partial` when a stage failed part-way.
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::input(path, e))?;
    Ok(sha256_hex(&bytes))
}

impl RunManifest {
    pub fn new(command: &str, seed: Option<u64>, config: serde_json::Value) -> Self {
        RunManifest {
            version: MANIFEST_VERSION,
            tool: "cftraj".into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed,
            config,
            inputs: vec![],
            outputs: vec![],
            status: "complete".into(),
            error: None,
        }
    }

    /// Records an input by the path the user gave.
    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let sha256 = hash_file(path)?;
        self.inputs.push(FileEntry { path: path.display().to_string(), sha256 });
        Ok(())
    }

    /// Records an output by its path relative to `base`.
    pub fn output(&mut self, base: &Path, path: &Path) -> Result<(), CliError> {
        let sha256 = hash_file(path)?;
        let rel = path.strip_prefix(base).unwrap_or(path);
        self.outputs.push(FileEntry { path: rel.to_string_lossy().replace('\\', "/"), sha256 });
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        write_text(path, &(serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"))
    }
}

/// `<out>.manifest.json` next to a single-file output.
pub fn sidecar(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}
