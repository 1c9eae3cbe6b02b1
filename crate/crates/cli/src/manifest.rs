//! Machine-readable record of what a command read and wrote.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use rtsom::spectral::hex_string;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct FileRecord {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub tool_version: &'static str,
    pub created_unix_seconds: u64,
    pub config_sha256: String,
    pub seed: u64,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex_string(&Sha256::digest(bytes))
}

pub fn record(path: &Path) -> Result<FileRecord> {
    let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(FileRecord {
        path: path.to_path_buf(),
        sha256: sha256_hex(&bytes),
    })
}

impl Manifest {
    pub fn new(command: &str, config_sha256: &str, seed: u64) -> Self {
        Self {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION"),
            created_unix_seconds: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            config_sha256: config_sha256.into(),
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(record(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(record(path)?);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::commands::write_file(path, serde_json::to_string_pretty(self)?.as_bytes())
    }
}
