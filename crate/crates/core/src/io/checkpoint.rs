//! Binary checkpoint format.
//!
//! ```text
//! "ARWK" | u32 version | u32 meta_len | meta JSON | u64 n_params
//! n_params × ( u32 name_len | name | u32 rank | rank × u64 dim )
//! payload: f32 LE values, in name-table order
//! u64 FNV-1a checksum of the payload
//! ```
//!
//! All integers are little-endian.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{read_bytes, write_bytes, FormatError, Reader};
use crate::error::Result;
use crate::model::{DecoderModel, ModelConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ARWK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    #[default]
    Model,
    /// Parameters plus optimizer moments (`m:` / `v:` name prefixes).
    TrainState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub kind: CheckpointKind,
    pub model: ModelConfig,
    pub stage: Option<String>,
    pub variant: Option<String>,
    pub tokens_seen: u64,
    /// Sequence length the model was last trained at.
    pub seq_len: Option<usize>,
    pub step: u64,
    /// Names of the trainable parameters at save time.
    #[serde(default)]
    pub trainable: Vec<String>,
}

impl CheckpointMeta {
    pub fn for_model(model: &DecoderModel) -> Self {
        Self {
            kind: CheckpointKind::Model,
            model: model.config.clone(),
            stage: None,
            variant: None,
            tokens_seen: 0,
            seq_len: None,
            step: 0,
            trainable: model.trainable_names(),
        }
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn encode_checkpoint(
    meta: &CheckpointMeta,
    tensors: &IndexMap<String, Tensor>,
) -> Result<Vec<u8>> {
    let meta_json = serde_json::to_vec(meta)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_json);
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
    }
    let payload_start = out.len();
    for (name, t) in tensors {
        for v in t.data() {
            let f = *v as f32;
            if f as f64 != *v && v.is_finite() {
                return Err(FormatError::NotF32(name.clone()).into());
            }
            out.extend_from_slice(&f.to_le_bytes());
        }
    }
    let sum = fnv1a64(&out[payload_start..]);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

pub fn decode_checkpoint(
    bytes: &[u8],
) -> std::result::Result<(CheckpointMeta, IndexMap<String, Tensor>), FormatError> {
    let mut r = Reader::new(bytes);
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(FormatError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let meta_len = r.u32("meta length")? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "meta")?)
        .map_err(|e| FormatError::BadMeta(e.to_string()))?;
    let count = r.u64("parameter count")? as usize;
    let mut table = Vec::new();
    for _ in 0..count {
        let n = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(n, "name")?.to_vec())
            .map_err(|_| FormatError::BadMeta("parameter name is not UTF-8".into()))?;
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dimension")? as usize);
        }
        table.push((name, shape));
    }
    let total: usize = table
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum();
    let payload = r.take(total * 4, "payload")?;
    let stored = r.u64("checksum")?;
    if !r.is_done() {
        return Err(FormatError::TrailingBytes);
    }
    let found = fnv1a64(payload);
    if found != stored {
        return Err(FormatError::ChecksumMismatch { stored, found });
    }
    let trainable: std::collections::HashSet<&str> =
        meta.trainable.iter().map(|s| s.as_str()).collect();
    let mut tensors = IndexMap::new();
    let mut offset = 0;
    for (name, shape) in table {
        let n: usize = shape.iter().product();
        let data = payload[offset * 4..(offset + n) * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        offset += n;
        let t = Tensor::from_raw(shape, data).with_grad(trainable.contains(name.as_str()));
        if tensors.insert(name.clone(), t).is_some() {
            return Err(FormatError::BadMeta(format!("duplicate parameter `{name}`")));
        }
    }
    Ok((meta, tensors))
}

/// Checks every tensor against the shape its config prescribes.
pub fn validate_shapes(
    config: &ModelConfig,
    tensors: &IndexMap<String, Tensor>,
) -> std::result::Result<(), FormatError> {
    for (name, t) in tensors {
        let base = name
            .strip_prefix("m:")
            .or_else(|| name.strip_prefix("v:"))
            .unwrap_or(name);
        match config.expected_shape(base) {
            Some(s) if s == t.shape() => {}
            expected => {
                return Err(FormatError::ShapeMismatch {
                    name: name.clone(),
                    stored: t.shape().to_vec(),
                    expected,
                })
            }
        }
    }
    Ok(())
}

pub fn save_checkpoint(model: &DecoderModel, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let mut meta = meta.clone();
    meta.model = model.config.clone();
    meta.trainable = model.trainable_names();
    let bytes = encode_checkpoint(&meta, &model.params)?;
    write_bytes(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<(DecoderModel, CheckpointMeta)> {
    let bytes = read_bytes(path)?;
    let (meta, params) = decode_checkpoint(&bytes)?;
    meta.model.validate()?;
    validate_shapes(&meta.model, &params)?;
    if meta.kind != CheckpointKind::Model {
        return Err(FormatError::BadMeta("not a model checkpoint".into()).into());
    }
    let model = DecoderModel {
        config: meta.model.clone(),
        params,
    };
    Ok((model, meta))
}
