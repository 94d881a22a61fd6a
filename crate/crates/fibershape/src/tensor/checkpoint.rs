//! Versioned binary serialization for named tensor collections.
//!
//! Layout (all integers little-endian):
//!
//! | field    | type        | notes                          |
//! |----------|-------------|--------------------------------|
//! | magic    | `[u8; 4]`   | `"FSCP"`                       |
//! | version  | `u32`       | currently 1                    |
//! | count    | `u32`       | number of tensors              |
//!
//! followed by `count` records:
//!
//! | field    | type        | notes                          |
//! |----------|-------------|--------------------------------|
//! | name_len | `u32`       | bytes of UTF-8 name            |
//! | name     | `[u8]`      |                                |
//! | rows     | `u32`       |                                |
//! | cols     | `u32`       |                                |
//! | data     | `[f64]`     | rows·cols entries, row-major   |
//!
//! Round-trips are bit-exact (including −0.0 and subnormals).

use std::path::{Path, PathBuf};

use thiserror::Error;

use super::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FSCP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad checkpoint magic {found:?}, expected \"FSCP\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported checkpoint version {found} (supported: {CHECKPOINT_VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("checkpoint truncated at byte {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("tensor name at byte {offset} is not valid UTF-8")]
    BadName { offset: usize },
    #[error("duplicate tensor name {name:?}")]
    DuplicateName { name: String },
    #[error("checkpoint io on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub fn encode_checkpoint(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let payload: usize = tensors
        .iter()
        .map(|(n, t)| 12 + n.len() + 8 * t.len())
        .sum();
    let mut out = Vec::with_capacity(12 + payload);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.offset + n > self.bytes.len() {
            return Err(CheckpointError::Truncated {
                offset: self.bytes.len(),
                needed: self.offset + n - self.bytes.len(),
            });
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut cur = Cursor { bytes, offset: 0 };
    let magic: [u8; 4] = cur.take(4)?.try_into().unwrap();
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic { found: magic });
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion { found: version });
    }
    let count = cur.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    let mut seen = std::collections::HashSet::new();
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name_offset = cur.offset;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| CheckpointError::BadName {
                offset: name_offset,
            })?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(CheckpointError::DuplicateName { name });
        }
        let rows = cur.u32()? as usize;
        let cols = cur.u32()? as usize;
        let raw = cur.take(8 * rows * cols)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor::from_vec(rows, cols, data)));
    }
    Ok(tensors)
}

pub fn write_checkpoint(
    path: &Path,
    tensors: &[(String, Tensor)],
) -> Result<(), CheckpointError> {
    std::fs::write(path, encode_checkpoint(tensors)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes)
}
