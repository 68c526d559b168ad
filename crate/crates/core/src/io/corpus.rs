//! Token-id corpus files.
//!
//! ```text
//! "ARWC" | u32 version | u32 vocab_size | u64 count | count × u32 id
//! ```

use std::path::Path;

use super::{read_bytes, write_bytes, FormatError, Reader};
use crate::error::Result;

pub const CORPUS_MAGIC: &[u8; 4] = b"ARWC";
pub const CORPUS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub vocab_size: u32,
    pub tokens: Vec<u32>,
}

impl Corpus {
    pub fn ids(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| *t as usize).collect()
    }
}

pub fn encode_corpus(c: &Corpus) -> std::result::Result<Vec<u8>, FormatError> {
    let mut out = Vec::with_capacity(20 + 4 * c.tokens.len());
    out.extend_from_slice(CORPUS_MAGIC);
    out.extend_from_slice(&CORPUS_VERSION.to_le_bytes());
    out.extend_from_slice(&c.vocab_size.to_le_bytes());
    out.extend_from_slice(&(c.tokens.len() as u64).to_le_bytes());
    for (index, id) in c.tokens.iter().enumerate() {
        if *id >= c.vocab_size {
            return Err(FormatError::TokenOutOfRange {
                index,
                id: *id,
                vocab: c.vocab_size,
            });
        }
        out.extend_from_slice(&id.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_corpus(bytes: &[u8]) -> std::result::Result<Corpus, FormatError> {
    let mut r = Reader::new(bytes);
    if r.take(4, "magic")? != CORPUS_MAGIC {
        return Err(FormatError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != CORPUS_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let vocab_size = r.u32("vocab size")?;
    let count = r.u64("token count")? as usize;
    let body = r.take(count.checked_mul(4).ok_or(FormatError::Truncated("tokens"))?, "tokens")?;
    if !r.is_done() {
        return Err(FormatError::TrailingBytes);
    }
    let mut tokens = Vec::with_capacity(count);
    for (index, c) in body.chunks_exact(4).enumerate() {
        let id = u32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        if id >= vocab_size {
            return Err(FormatError::TokenOutOfRange {
                index,
                id,
                vocab: vocab_size,
            });
        }
        tokens.push(id);
    }
    Ok(Corpus { vocab_size, tokens })
}

pub fn save_corpus(c: &Corpus, path: &Path) -> Result<()> {
    write_bytes(path, &encode_corpus(c)?)
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    Ok(decode_corpus(&read_bytes(path)?)?)
}
