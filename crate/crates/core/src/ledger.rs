//! Private hash-chained allow-list of trusted device IDs.
//!
//! Each block holds a slice of the trusted IDs and the SHA-256 of its
//! predecessor. Nodes consult the chain as a look-up table; any edit to a
//! stored block breaks the recomputed hash or the linkage and is caught by
//! [`Chain::verify`]. There is no proof of work and no revocation.
//!
//! Hash input, byte for byte:
//! `index 0x1F timestamp 0x1F id_1 0x1E id_2 ... 0x1F prev_hash`
//! with decimal ASCII numbers and the lowercase hex predecessor digest.
//!
//! Text form, one block per line: `index|timestamp|id1,id2,...|prev_hash|hash`.

use std::collections::HashSet;
use std::fmt;

use sha2::{Digest, Sha256};
use thiserror::Error;

pub const ZERO_HASH: &str = "0000000000000000000000000000000000000000000000000000000000000000";

const UNIT_SEP: u8 = 0x1F;
const RECORD_SEP: u8 = 0x1E;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LedgerError {
    #[error("chain failed verification at block {index}: {reason}")]
    Integrity { index: u64, reason: String },
    #[error("device id {0:?} is already in the ledger")]
    DuplicateId(String),
    #[error("invalid device id {id:?}: {reason}")]
    InvalidId { id: String, reason: &'static str },
    #[error("a block needs at least one device id")]
    EmptyBlock,
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub index: u64,
    pub timestamp: u64,
    pub device_ids: Vec<String>,
    pub prev_hash: String,
    pub hash: String,
}

impl Block {
    fn sealed(index: u64, timestamp: u64, device_ids: Vec<String>, prev_hash: String) -> Self {
        let hash = block_hash(index, timestamp, &device_ids, &prev_hash);
        Self {
            index,
            timestamp,
            device_ids,
            prev_hash,
            hash,
        }
    }

    pub fn computed_hash(&self) -> String {
        block_hash(
            self.index,
            self.timestamp,
            &self.device_ids,
            &self.prev_hash,
        )
    }
}

/// Canonical byte encoding fed to SHA-256.
pub fn canonical_bytes(
    index: u64,
    timestamp: u64,
    device_ids: &[String],
    prev_hash: &str,
) -> Vec<u8> {
    let mut buf = Vec::with_capacity(64 + prev_hash.len() + device_ids.len() * 8);
    buf.extend_from_slice(index.to_string().as_bytes());
    buf.push(UNIT_SEP);
    buf.extend_from_slice(timestamp.to_string().as_bytes());
    buf.push(UNIT_SEP);
    for (i, id) in device_ids.iter().enumerate() {
        if i > 0 {
            buf.push(RECORD_SEP);
        }
        buf.extend_from_slice(id.as_bytes());
    }
    buf.push(UNIT_SEP);
    buf.extend_from_slice(prev_hash.as_bytes());
    buf
}

pub fn block_hash(index: u64, timestamp: u64, device_ids: &[String], prev_hash: &str) -> String {
    hex::encode(Sha256::digest(canonical_bytes(
        index, timestamp, device_ids, prev_hash,
    )))
}

pub fn validate_id(id: &str) -> Result<(), LedgerError> {
    let bad = |reason| {
        Err(LedgerError::InvalidId {
            id: id.to_string(),
            reason,
        })
    };
    if id.is_empty() {
        return bad("empty");
    }
    if id.chars().any(|c| {
        matches!(c, '|' | ',' | '\u{1e}' | '\u{1f}') || c.is_control() || c.is_whitespace()
    }) {
        return bad("contains a separator, whitespace or control character");
    }
    Ok(())
}

/// Outcome of [`Chain::verify`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifyReport {
    pub ok: bool,
    pub first_bad_index: Option<u64>,
    pub reason: Option<String>,
}

impl VerifyReport {
    fn good() -> Self {
        Self {
            ok: true,
            first_bad_index: None,
            reason: None,
        }
    }

    fn bad(index: usize, reason: impl Into<String>) -> Self {
        Self {
            ok: false,
            first_bad_index: Some(index as u64),
            reason: Some(reason.into()),
        }
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.first_bad_index, &self.reason) {
            (Some(i), Some(r)) => write!(f, "FAILED at block {i}: {r}"),
            _ => write!(f, "ok"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chain {
    blocks: Vec<Block>,
}

impl Chain {
    /// Single empty block with the all-zero predecessor.
    pub fn genesis(timestamp: u64) -> Self {
        Self {
            blocks: vec![Block::sealed(
                0,
                timestamp,
                Vec::new(),
                ZERO_HASH.to_string(),
            )],
        }
    }

    /// Wraps blocks as-is. Nothing is checked; call [`Chain::verify`].
    pub fn from_blocks(blocks: Vec<Block>) -> Self {
        Self { blocks }
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// Mutable access for tooling and tamper tests. Edits invalidate the chain.
    pub fn blocks_mut(&mut self) -> &mut Vec<Block> {
        &mut self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn tip_hash(&self) -> Option<&str> {
        self.blocks.last().map(|b| b.hash.as_str())
    }

    pub fn verify(&self) -> VerifyReport {
        if self.blocks.is_empty() {
            return VerifyReport::bad(0, "chain has no genesis block");
        }
        for (i, block) in self.blocks.iter().enumerate() {
            if block.index != i as u64 {
                return VerifyReport::bad(
                    i,
                    format!("stored index {} != position {i}", block.index),
                );
            }
            let expected_prev = if i == 0 {
                ZERO_HASH
            } else {
                self.blocks[i - 1].hash.as_str()
            };
            if block.prev_hash != expected_prev {
                return VerifyReport::bad(i, "prev_hash does not match predecessor");
            }
            if block.hash != block.computed_hash() {
                return VerifyReport::bad(i, "stored hash does not match contents");
            }
        }
        VerifyReport::good()
    }

    fn contains(&self, device_id: &str) -> bool {
        self.blocks
            .iter()
            .any(|b| b.device_ids.iter().any(|d| d == device_id))
    }

    /// Returns a new chain with one more block; `self` is left untouched.
    pub fn append_block<S: AsRef<str>>(
        &self,
        device_ids: &[S],
        timestamp: u64,
    ) -> Result<Chain, LedgerError> {
        let report = self.verify();
        if !report.ok {
            return Err(LedgerError::Integrity {
                index: report.first_bad_index.unwrap_or(0),
                reason: report.reason.unwrap_or_default(),
            });
        }
        if device_ids.is_empty() {
            return Err(LedgerError::EmptyBlock);
        }
        let mut seen = HashSet::new();
        let mut ids = Vec::with_capacity(device_ids.len());
        for id in device_ids {
            let id = id.as_ref();
            validate_id(id)?;
            if !seen.insert(id) || self.contains(id) {
                return Err(LedgerError::DuplicateId(id.to_string()));
            }
            ids.push(id.to_string());
        }
        let tip = self.blocks.last().expect("verified chain is non-empty");
        let mut blocks = self.blocks.clone();
        blocks.push(Block::sealed(
            tip.index + 1,
            timestamp,
            ids,
            tip.hash.clone(),
        ));
        Ok(Chain { blocks })
    }

    /// Look-up gate. A chain that fails verification authorizes nobody.
    pub fn is_authorized(&self, device_id: &str) -> bool {
        let report = self.verify();
        if !report.ok {
            log::warn!("ledger integrity alert while checking {device_id:?}: {report}");
            return false;
        }
        self.contains(device_id)
    }

    /// All IDs in block order.
    pub fn authorized_ids(&self) -> Vec<&str> {
        self.blocks
            .iter()
            .flat_map(|b| b.device_ids.iter().map(String::as_str))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for b in &self.blocks {
            out.push_str(&format!(
                "{}|{}|{}|{}|{}\n",
                b.index,
                b.timestamp,
                b.device_ids.join(","),
                b.prev_hash,
                b.hash
            ));
        }
        out
    }

    /// Parses the line format. Only syntax is checked here; integrity is
    /// left to [`Chain::verify`] so tampered files still load.
    pub fn from_text(text: &str) -> Result<Chain, LedgerError> {
        let mut blocks = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line_no = n + 1;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |reason: String| LedgerError::Parse {
                line: line_no,
                reason,
            };
            let fields: Vec<&str> = line.split('|').collect();
            if fields.len() != 5 {
                return Err(parse_err(format!(
                    "expected 5 fields, found {}",
                    fields.len()
                )));
            }
            let index = fields[0]
                .parse::<u64>()
                .map_err(|e| parse_err(format!("index: {e}")))?;
            let timestamp = fields[1]
                .parse::<u64>()
                .map_err(|e| parse_err(format!("timestamp: {e}")))?;
            let device_ids = if fields[2].is_empty() {
                Vec::new()
            } else {
                fields[2].split(',').map(str::to_string).collect()
            };
            blocks.push(Block {
                index,
                timestamp,
                device_ids,
                prev_hash: fields[3].to_string(),
                hash: fields[4].to_string(),
            });
        }
        if blocks.is_empty() {
            return Err(LedgerError::Parse {
                line: 0,
                reason: "no blocks".into(),
            });
        }
        Ok(Chain { blocks })
    }
}
