//! Run manifests: enough to reproduce a command's outputs bit for bit.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const FILE_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Serialize)]
pub struct OutputFile {
    pub path: String,
    pub sha256: String,
}

/// Holds no timestamps, so identical runs produce identical manifests.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    /// Fully resolved config; valid as `--config` input for `command`.
    pub config: Value,
    pub seed: u64,
    pub dataset_fingerprint: Option<String>,
    pub outputs: Vec<OutputFile>,
    /// sha256 over "blob <len>\0" followed by the checkpoint bytes.
    pub checkpoint_hash: Option<String>,
}

impl RunManifest {
    pub fn new(command: &str, config: &impl Serialize, seed: u64) -> Result<Self> {
        Ok(RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config: serde_json::to_value(config)?,
            seed,
            dataset_fingerprint: None,
            outputs: Vec::new(),
            checkpoint_hash: None,
        })
    }

    /// Records a written file, hashed as it is on disk.
    pub fn output(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.outputs.push(OutputFile {
            path: file_name(path),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        Ok(())
    }

    pub fn checkpoint(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.checkpoint_hash = Some(blob_hash(&bytes));
        self.output(path)
    }

    /// Sorted keys, no insignificant whitespace, trailing newline.
    pub fn canonical_json(&self) -> Result<String> {
        // serde_json's default map is ordered by key
        let value = serde_json::to_value(self)?;
        Ok(format!("{value}\n"))
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(FILE_NAME);
        fs::write(&path, self.canonical_json()?).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| path.display().to_string())
}
