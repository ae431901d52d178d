//! JSON-lines ledger export: one block per line, compact, `\n`-terminated.
//!
//! Field names are those of [`Block`] and [`IdentityRecord`]. Parsing is
//! bit-exact: a line must re-serialize to exactly the same bytes, so any byte
//! change is either a parse failure or a content change that verification
//! catches.

use thiserror::Error;

use super::{verify_chain, Block, ChainFailure, ChainVerdict, ValidatorSet};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExportError {
    #[error("ledger export is truncated (missing final newline)")]
    Truncated,
    #[error("invalid validators file: {0}")]
    Validators(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExportLine {
    Block(Block),
    Malformed { line: usize, reason: String },
}

pub fn write_jsonl(chain: &[Block]) -> String {
    let mut out = String::new();
    for b in chain {
        out.push_str(&serde_json::to_string(b).expect("block serializes"));
        out.push('\n');
    }
    out
}

fn parse_line(line: &[u8]) -> Result<Block, String> {
    if line.is_empty() {
        return Err("empty line".into());
    }
    let text = std::str::from_utf8(line).map_err(|e| e.to_string())?;
    let block: Block = serde_json::from_str(text).map_err(|e| e.to_string())?;
    if serde_json::to_string(&block).expect("block serializes") != text {
        return Err("non-canonical encoding".into());
    }
    Ok(block)
}

pub fn parse_jsonl(bytes: &[u8]) -> Result<Vec<ExportLine>, ExportError> {
    if bytes.is_empty() {
        return Ok(Vec::new());
    }
    let body = bytes.strip_suffix(b"\n").ok_or(ExportError::Truncated)?;
    Ok(body
        .split(|b| *b == b'\n')
        .enumerate()
        .map(|(i, line)| match parse_line(line) {
            Ok(b) => ExportLine::Block(b),
            Err(reason) => ExportLine::Malformed { line: i + 1, reason },
        })
        .collect())
}

/// Parses and verifies an export. A malformed line counts as a bad block at
/// that position; only a structurally truncated file is an error.
pub fn verify_export(bytes: &[u8], validators: &ValidatorSet) -> Result<ChainVerdict, ExportError> {
    let lines = parse_jsonl(bytes)?;
    let mut blocks = Vec::with_capacity(lines.len());
    for line in lines {
        match line {
            ExportLine::Block(b) => blocks.push(b),
            ExportLine::Malformed { line, reason } => {
                let prefix = verify_chain(&blocks, validators);
                if !prefix.is_valid() {
                    return Ok(prefix);
                }
                return Ok(ChainVerdict {
                    blocks_checked: blocks.len() + 1,
                    failure: Some(ChainFailure {
                        height: blocks.len() as u64,
                        reason: format!("line {line} malformed: {reason}"),
                    }),
                });
            }
        }
    }
    Ok(verify_chain(&blocks, validators))
}

pub fn write_validators(set: &ValidatorSet) -> String {
    let mut s = serde_json::to_string_pretty(set).expect("validator set serializes");
    s.push('\n');
    s
}

pub fn parse_validators(bytes: &[u8]) -> Result<ValidatorSet, ExportError> {
    let set: ValidatorSet = serde_json::from_slice(bytes).map_err(|e| ExportError::Validators(e.to_string()))?;
    set.validate().map_err(|e| ExportError::Validators(e.to_string()))?;
    Ok(set)
}
