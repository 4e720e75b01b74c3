//! Byte format of fog → cloud messages.
//!
//! A message is a length-prefixed field list, all integers little-endian:
//!
//! ```text
//! u32 field_count
//! repeated: u16 name_len | name | u32 payload_len | payload
//! ```
//!
//! Fields appear in the fixed order `filter_id,k,x,P`:
//! `filter_id` is a u32, `k` a u64, `x` is `u32 n` then `n` f64 values, and
//! `P` is `u32 rows, u32 cols` then the entries row-major as f64.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::federation::LocalPacket;

pub const FIELD_NAMES: [&str; 4] = ["filter_id", "k", "x", "P"];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("message truncated at byte {0}")]
    Truncated(usize),
    #[error("expected field {expected:?}, found {found:?}")]
    UnexpectedField {
        expected: &'static str,
        found: String,
    },
    #[error("field {field} has malformed payload")]
    BadPayload { field: &'static str },
    #[error("trailing bytes after message")]
    Trailing,
}

fn push_field(buf: &mut Vec<u8>, name: &str, payload: &[u8]) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    buf.extend_from_slice(payload);
}

pub fn encode_packet(packet: &LocalPacket) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&(FIELD_NAMES.len() as u32).to_le_bytes());
    push_field(&mut buf, "filter_id", &packet.filter_id.to_le_bytes());
    push_field(&mut buf, "k", &packet.k.to_le_bytes());

    let mut x = Vec::with_capacity(4 + 8 * packet.x.len());
    x.extend_from_slice(&(packet.x.len() as u32).to_le_bytes());
    for v in packet.x.iter() {
        x.extend_from_slice(&v.to_le_bytes());
    }
    push_field(&mut buf, "x", &x);

    let (rows, cols) = packet.p.shape();
    let mut p = Vec::with_capacity(8 + 8 * rows * cols);
    p.extend_from_slice(&(rows as u32).to_le_bytes());
    p.extend_from_slice(&(cols as u32).to_le_bytes());
    for r in 0..rows {
        for c in 0..cols {
            p.extend_from_slice(&packet.p[(r, c)].to_le_bytes());
        }
    }
    push_field(&mut buf, "P", &p);
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let end = self
            .pos
            .checked_add(n)
            .ok_or(WireError::Truncated(self.pos))?;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or(WireError::Truncated(self.pos))?;
        self.pos = end;
        Ok(slice)
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn field(&mut self, expected: &'static str) -> Result<&'a [u8], WireError> {
        let name_len = self.u16()? as usize;
        let name = self.take(name_len)?;
        if name != expected.as_bytes() {
            return Err(WireError::UnexpectedField {
                expected,
                found: String::from_utf8_lossy(name).into_owned(),
            });
        }
        let len = self.u32()? as usize;
        self.take(len)
    }
}

fn f64s(bytes: &[u8], field: &'static str) -> Result<Vec<f64>, WireError> {
    if !bytes.len().is_multiple_of(8) {
        return Err(WireError::BadPayload { field });
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn decode_packet(bytes: &[u8]) -> Result<LocalPacket, WireError> {
    let mut r = Reader { bytes, pos: 0 };
    let count = r.u32()?;
    if count as usize != FIELD_NAMES.len() {
        return Err(WireError::BadPayload {
            field: "field_count",
        });
    }

    let id = r.field("filter_id")?;
    let filter_id = u32::from_le_bytes(
        id.try_into()
            .map_err(|_| WireError::BadPayload { field: "filter_id" })?,
    );
    let k = r.field("k")?;
    let k = u64::from_le_bytes(
        k.try_into()
            .map_err(|_| WireError::BadPayload { field: "k" })?,
    );

    let x = r.field("x")?;
    if x.len() < 4 {
        return Err(WireError::BadPayload { field: "x" });
    }
    let n = u32::from_le_bytes(x[..4].try_into().unwrap()) as usize;
    let xs = f64s(&x[4..], "x")?;
    if xs.len() != n {
        return Err(WireError::BadPayload { field: "x" });
    }

    let p = r.field("P")?;
    if p.len() < 8 {
        return Err(WireError::BadPayload { field: "P" });
    }
    let rows = u32::from_le_bytes(p[..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(p[4..8].try_into().unwrap()) as usize;
    let ps = f64s(&p[8..], "P")?;
    if ps.len() != rows * cols {
        return Err(WireError::BadPayload { field: "P" });
    }
    if r.pos != bytes.len() {
        return Err(WireError::Trailing);
    }
    Ok(LocalPacket {
        filter_id,
        x: DVector::from_vec(xs),
        p: DMatrix::from_row_slice(rows, cols, &ps),
        k,
    })
}

/// Byte offsets where `needle` occurs in `haystack`.
fn occurrences(haystack: &[u8], needle: &[u8]) -> usize {
    if needle.is_empty() || haystack.len() < needle.len() {
        return 0;
    }
    haystack
        .windows(needle.len())
        .filter(|w| *w == needle)
        .count()
}

/// Counts how many times any of `raw_values` appears, as an encoded f64,
/// anywhere in `message`.
pub fn raw_value_hits(message: &[u8], raw_values: &[f64]) -> usize {
    raw_values
        .iter()
        .map(|v| occurrences(message, &v.to_le_bytes()))
        .sum()
}
