//! Files: checkpoints, corpora, run configs, metrics streams and manifests.

mod checkpoint;
mod config;
mod corpus;
mod manifest;
mod metrics;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, fnv1a64, load_checkpoint, save_checkpoint,
    validate_shapes, CheckpointKind, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{load_config, parse_config, DataConfig, RunConfig};
pub use corpus::{
    decode_corpus, encode_corpus, load_corpus, save_corpus, Corpus, CORPUS_MAGIC, CORPUS_VERSION,
};
pub use manifest::{git_blob_hash, sha256_bytes, sha256_file, FileHash, RunManifest};
pub use metrics::{read_metrics, MetricRecord, MetricsWriter};

use std::path::Path;

use thiserror::Error;

use crate::error::{Error, Result};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("file truncated while reading {0}")]
    Truncated(&'static str),
    #[error("unexpected bytes after checksum")]
    TrailingBytes,
    #[error("checksum mismatch: stored {stored:#018x}, computed {found:#018x}")]
    ChecksumMismatch { stored: u64, found: u64 },
    #[error("shape mismatch for `{name}`: stored {stored:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        stored: Vec<usize>,
        expected: Option<Vec<usize>>,
    },
    #[error("parameter `{0}` holds a value that is not representable as f32")]
    NotF32(String),
    #[error("token id {id} at index {index} is outside vocab {vocab}")]
    TokenOutOfRange { index: usize, id: u32, vocab: u32 },
    #[error("bad metadata: {0}")]
    BadMeta(String),
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(
        &mut self,
        n: usize,
        what: &'static str,
    ) -> std::result::Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).ok_or(FormatError::Truncated(what))?;
        if end > self.bytes.len() {
            return Err(FormatError::Truncated(what));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self, what: &'static str) -> std::result::Result<u32, FormatError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self, what: &'static str) -> std::result::Result<u64, FormatError> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
