//! The CDIE embedding matrix: `"CDIE"`, then version, row count and
//! dimension as little-endian `u32`, then `count · dim` little-endian `f32`
//! values in row-major order.

use std::path::Path;

use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CDIE";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;

/// A dense `count × dim` matrix of `f32` embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub count: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl Embeddings {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Byte offset of element `(row, col)` in the encoded file.
    pub fn offset_of(&self, row: usize, col: usize) -> u64 {
        (HEADER_LEN + 4 * (row * self.dim + col)) as u64
    }
}

fn binary_err(name: &str, offset: usize, message: String) -> Error {
    Error::Binary {
        source_name: name.to_string(),
        offset: offset as u64,
        message,
    }
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

/// Decodes a CDIE buffer; `name` labels error messages.
pub fn decode(bytes: &[u8], name: &str) -> Result<Embeddings> {
    if bytes.len() < HEADER_LEN {
        return Err(binary_err(
            name,
            bytes.len(),
            format!("truncated header: need {HEADER_LEN} bytes, found {}", bytes.len()),
        ));
    }
    if &bytes[..4] != MAGIC {
        return Err(binary_err(name, 0, format!("bad magic {:?}, expected \"CDIE\"", &bytes[..4])));
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(binary_err(name, 4, format!("unsupported version {version}, expected {VERSION}")));
    }
    let count = u32_at(bytes, 8) as usize;
    let dim = u32_at(bytes, 12) as usize;
    let expected = count
        .checked_mul(dim)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| binary_err(name, 8, format!("header count {count} × dim {dim} overflows")))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(binary_err(
            name,
            HEADER_LEN + payload.len().min(expected),
            format!(
                "header declares {count} rows of dim {dim} ({expected} bytes) but the payload holds {} bytes",
                payload.len()
            ),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect();
    Ok(Embeddings { count, dim, data })
}

pub fn encode(emb: &Embeddings) -> Result<Vec<u8>> {
    if emb.data.len() != emb.count * emb.dim {
        return Err(Error::Core(cdi_core::Error::DimensionMismatch {
            expected: emb.count * emb.dim,
            actual: emb.data.len(),
        }));
    }
    let count = u32::try_from(emb.count).map_err(|_| Error::Config("too many rows for CDIE".into()))?;
    let dim = u32::try_from(emb.dim).map_err(|_| Error::Config("dimension too large for CDIE".into()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * emb.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    for v in &emb.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn read(path: &Path) -> Result<Embeddings> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, &path.display().to_string())
}

pub fn write(path: &Path, emb: &Embeddings) -> Result<()> {
    std::fs::write(path, encode(emb)?).map_err(|e| Error::io(path, e))
}
