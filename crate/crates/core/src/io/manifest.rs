//! Run manifests and content hashes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{read_bytes, write_bytes};
use crate::error::Result;

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_bytes(&read_bytes(path)?))
}

/// Git blob id under SHA-256: hash of `"blob <len>\0" + bytes`.
pub fn git_blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub hash: String,
}

impl FileHash {
    pub fn checkpoint(path: &Path) -> Result<Self> {
        Ok(Self {
            path: path.display().to_string(),
            hash: sha256_file(path)?,
        })
    }

    pub fn corpus(path: &Path) -> Result<Self> {
        Ok(Self {
            path: path.display().to_string(),
            hash: git_blob_hash(&read_bytes(path)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub stage: String,
    pub variant: Option<String>,
    /// Fully resolved configuration, defaults included.
    pub config: serde_json::Value,
    pub seed: u64,
    pub precision: String,
    pub inputs: Vec<FileHash>,
    pub corpora: Vec<FileHash>,
    pub output: Option<FileHash>,
    pub metrics_path: Option<String>,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_bytes(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&read_bytes(path)?)?)
    }
}
