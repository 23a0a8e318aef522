//! Byte-level tokenization, corpus ingestion and the budgeted,
//! epoch-repeating batch stream.

mod stream;
pub mod synth;

pub use stream::{join_documents, pack_sequences, Batch, BatchStream, BudgetedCorpus, Packed, ValidationCursor};

use std::path::Path;

use crate::Token;

/// Mask symbol of the absorbing corruption.
pub const MASK: Token = 256;
pub const PAD: Token = 257;
/// Beginning of document; also the separator when packing documents.
pub const BOS: Token = 258;
pub const VOCAB_SIZE: usize = 259;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("source holds {available} tokens, budget needs {required}")]
    SourceTooSmall { available: usize, required: usize },
    #[error("invalid data configuration: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

pub fn tokenize(bytes: &[u8]) -> Vec<Token> {
    bytes.iter().map(|&b| b as Token).collect()
}

/// Bytes of `tokens`; special ids are dropped and counted.
pub fn detokenize(tokens: &[Token]) -> (Vec<u8>, usize) {
    let bytes: Vec<u8> = tokens.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect();
    let dropped = tokens.len() - bytes.len();
    if dropped > 0 {
        log::warn!("detokenize dropped {dropped} special tokens");
    }
    (bytes, dropped)
}

/// Lossy text view for logs and generated samples.
pub fn detokenize_lossy(tokens: &[Token]) -> String {
    String::from_utf8_lossy(&detokenize(tokens).0).into_owned()
}

/// Newline-delimited documents of a file; blank lines are skipped.
pub fn load_documents(path: &Path) -> Result<Vec<Vec<Token>>> {
    let raw = std::fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(split_documents(&raw))
}

pub fn split_documents(raw: &[u8]) -> Vec<Vec<Token>> {
    raw.split(|&b| b == b'\n')
        .map(|l| l.strip_suffix(b"\r").unwrap_or(l))
        .filter(|l| !l.iter().all(u8::is_ascii_whitespace))
        .map(tokenize)
        .collect()
}

#[cfg(test)]
mod tests;
