//! FMEB v1, a little-endian binary container for labelled embeddings.
//!
//! ```text
//! magic        4 bytes   "FMEB"
//! version      u16       1
//! dim          u32
//! class_count  u32
//! class names  class_count × (u16 byte length, UTF-8 bytes)
//! record_count u64
//! records      record_count × (u32 class index, dim × f32)
//! ```
//!
//! Prompt files use the same layout with exactly one record per class.

use std::path::Path;

use thiserror::Error;

use super::{EmbeddingDataset, Record};
use crate::error::{Error, Result};
use crate::numerics::EmbeddingVec;

pub const MAGIC: [u8; 4] = *b"FMEB";
pub const VERSION: u16 = 1;

/// Byte offset of the `dim` field.
const DIM_OFFSET: usize = 6;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FmebError {
    #[error("bad magic at byte 0: found {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported version {found} at byte {offset}")]
    UnsupportedVersion { offset: usize, found: u16 },

    #[error("truncated at byte {offset}: need {needed} more bytes, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },

    #[error("dimension mismatch at byte {offset}: expected {expected}, file declares {found}")]
    DimMismatch {
        offset: usize,
        expected: usize,
        found: usize,
    },

    #[error("{count} trailing bytes after the last record at byte {offset}")]
    TrailingBytes { offset: usize, count: usize },

    #[error("malformed content at byte {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FmebError> {
        let available = self.bytes.len() - self.pos;
        if available < n {
            return Err(FmebError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16, FmebError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, FmebError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, FmebError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn encode(dataset: &EmbeddingDataset) -> Result<Vec<u8>> {
    dataset.validate()?;
    let mut out = Vec::with_capacity(32 + dataset.records.len() * (4 + 4 * dataset.dim));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(dataset.dim as u32).to_le_bytes());
    out.extend_from_slice(&(dataset.class_names.len() as u32).to_le_bytes());
    for name in &dataset.class_names {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::config(format!("class name longer than 65535 bytes: {name:.32}…")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
    }
    out.extend_from_slice(&(dataset.records.len() as u64).to_le_bytes());
    for rec in &dataset.records {
        out.extend_from_slice(&(rec.class as u32).to_le_bytes());
        for &v in rec.embedding.iter() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses a complete FMEB byte buffer. When `expected_dim` is given the
/// header dimension must match it.
pub fn decode(bytes: &[u8], expected_dim: Option<usize>) -> Result<EmbeddingDataset, FmebError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = cur
        .take(4)
        .map_err(|_| {
            let mut found = [0u8; 4];
            found[..bytes.len().min(4)].copy_from_slice(&bytes[..bytes.len().min(4)]);
            FmebError::BadMagic { found }
        })?
        .try_into()
        .unwrap();
    if magic != MAGIC {
        return Err(FmebError::BadMagic { found: magic });
    }
    let version_offset = cur.pos;
    let version = cur.u16()?;
    if version != VERSION {
        return Err(FmebError::UnsupportedVersion {
            offset: version_offset,
            found: version,
        });
    }
    let dim = cur.u32()? as usize;
    if dim == 0 {
        return Err(FmebError::Malformed {
            offset: DIM_OFFSET,
            reason: "dimension is zero".into(),
        });
    }
    if let Some(expected) = expected_dim {
        if expected != dim {
            return Err(FmebError::DimMismatch {
                offset: DIM_OFFSET,
                expected,
                found: dim,
            });
        }
    }
    let class_count = cur.u32()? as usize;
    let mut class_names = Vec::with_capacity(class_count.min(1 << 16));
    for _ in 0..class_count {
        let len = cur.u16()? as usize;
        let offset = cur.pos;
        let raw = cur.take(len)?;
        let name = std::str::from_utf8(raw).map_err(|e| FmebError::Malformed {
            offset: offset + e.valid_up_to(),
            reason: "class name is not valid UTF-8".into(),
        })?;
        class_names.push(name.to_owned());
    }
    let record_count = cur.u64()? as usize;
    let record_bytes = 4 + 4 * dim;
    let available = bytes.len() - cur.pos;
    let needed = record_count
        .checked_mul(record_bytes)
        .ok_or_else(|| FmebError::Malformed {
            offset: cur.pos - 8,
            reason: "record count overflows".into(),
        })?;
    if available < needed {
        let complete = available / record_bytes;
        return Err(FmebError::Truncated {
            offset: cur.pos + complete * record_bytes,
            needed: record_bytes,
            available: available - complete * record_bytes,
        });
    }
    let mut records = Vec::with_capacity(record_count);
    for _ in 0..record_count {
        let offset = cur.pos;
        let class = cur.u32()? as usize;
        if class >= class_names.len() {
            return Err(FmebError::Malformed {
                offset,
                reason: format!("class index {class} out of range for {} classes", class_names.len()),
            });
        }
        let raw = cur.take(4 * dim)?;
        let values: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let embedding = EmbeddingVec::new(values).map_err(|_| FmebError::Malformed {
            offset: offset + 4,
            reason: "non-finite embedding value".into(),
        })?;
        records.push(Record { class, embedding });
    }
    if cur.pos != bytes.len() {
        return Err(FmebError::TrailingBytes {
            offset: cur.pos,
            count: bytes.len() - cur.pos,
        });
    }
    Ok(EmbeddingDataset {
        dim,
        class_names,
        records,
    })
}

pub fn write_fmeb(dataset: &EmbeddingDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(dataset)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_fmeb(path: impl AsRef<Path>) -> Result<EmbeddingDataset> {
    read_fmeb_with_dim(path, None)
}

pub fn read_fmeb_with_dim(path: impl AsRef<Path>, expected_dim: Option<usize>) -> Result<EmbeddingDataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode(&bytes, expected_dim)?)
}
