//! Embedding file format.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "ACDE"
//! 4       4     format version (u32 LE, currently 1)
//! 8       4     row count (u32 LE)
//! 12      4     row width (u32 LE)
//! 16      4·n·d f32 LE values, row-major
//! ```
//!
//! Values are computed in f64 and stored as f32; reading widens back to f64.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const MAGIC: [u8; 4] = *b"ACDE";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub fn encode_matrix(m: &Matrix) -> Result<Vec<u8>> {
    let count = u32::try_from(m.rows()).map_err(|_| Error::Format {
        field: "count",
        message: format!("{} rows exceed u32", m.rows()),
    })?;
    let dim = u32::try_from(m.cols()).map_err(|_| Error::Format {
        field: "dim",
        message: format!("{} columns exceed u32", m.cols()),
    })?;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * m.data().len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    for &v in m.data() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::Format {
                field: "data",
                message: format!("value {v} is not representable as a finite f32"),
            });
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

fn header_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4-byte slice"))
}

pub fn decode_matrix(bytes: &[u8]) -> Result<Matrix> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format {
            field: "header",
            message: format!("need {HEADER_LEN} header bytes, file has {}", bytes.len()),
        });
    }
    if bytes[..4] != MAGIC {
        return Err(Error::Format {
            field: "magic",
            message: format!("expected {:?}, found {:?}", MAGIC, &bytes[..4]),
        });
    }
    let version = header_u32(bytes, 4);
    if version != FORMAT_VERSION {
        return Err(Error::Format {
            field: "version",
            message: format!("unsupported version {version}"),
        });
    }
    let count = header_u32(bytes, 8) as usize;
    let dim = header_u32(bytes, 12) as usize;
    let payload = &bytes[HEADER_LEN..];
    let expected = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format {
            field: "count",
            message: format!("{count} x {dim} overflows"),
        })?;
    if payload.len() < expected {
        return Err(Error::Format {
            field: "count",
            message: format!(
                "truncated: header declares {count} rows of width {dim} ({expected} bytes), payload has {} bytes ({} full rows)",
                payload.len(),
                if dim == 0 { 0 } else { payload.len() / (4 * dim) }
            ),
        });
    }
    if payload.len() > expected {
        return Err(Error::Format {
            field: "data",
            message: format!("{} trailing bytes after payload", payload.len() - expected),
        });
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Matrix::new(count, dim, data).map_err(|e| Error::Format {
        field: "data",
        message: e.to_string(),
    })
}

pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    let bytes = encode_matrix(m)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_matrix(&bytes)
}
