//! `SLIDEEMB` binary container for one slide's patch embeddings.
//!
//! ```text
//! offset  size  field
//!      0     8  magic "SLIDEEMB"
//!      8     1  version (1)
//!      9     1  dtype (0 = f32, 1 = f64)
//!     10     4  n, u32 little-endian
//!     14     4  d, u32 little-endian
//!     18   n*d  payload, row-major little-endian
//! ```

use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::Matrix;

pub const EMBEDDING_MAGIC: &[u8; 8] = b"SLIDEEMB";
pub const EMBEDDING_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 18;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

impl std::str::FromStr for Dtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            other => Err(Error::Config(format!("unknown dtype `{other}` (expected f32 or f64)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddingHeader {
    pub version: u8,
    pub dtype: Dtype,
    pub n: u32,
    pub d: u32,
}

impl EmbeddingHeader {
    pub fn payload_len(&self) -> u64 {
        self.n as u64 * self.d as u64 * self.dtype.width() as u64
    }
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

/// Parses and validates the 18-byte header.
pub fn decode_header(bytes: &[u8]) -> Result<EmbeddingHeader> {
    if bytes.len() < HEADER_LEN {
        return Err(format_err(
            bytes.len(),
            format!("truncated header: expected {HEADER_LEN} bytes, found {}", bytes.len()),
        ));
    }
    if let Some(at) = bytes[..8].iter().zip(EMBEDDING_MAGIC).position(|(a, b)| a != b) {
        return Err(format_err(at, format!("bad magic {:?}, expected \"SLIDEEMB\"", String::from_utf8_lossy(&bytes[..8]))));
    }
    if bytes[8] != EMBEDDING_VERSION {
        return Err(format_err(8, format!("unsupported version {}, expected {EMBEDDING_VERSION}", bytes[8])));
    }
    let dtype = Dtype::from_code(bytes[9]).ok_or_else(|| format_err(9, format!("unknown dtype code {}", bytes[9])))?;
    let n = u32::from_le_bytes(bytes[10..14].try_into().expect("4 bytes"));
    let d = u32::from_le_bytes(bytes[14..18].try_into().expect("4 bytes"));
    if n == 0 {
        return Err(format_err(10, "bag has n = 0 patches"));
    }
    if d == 0 {
        return Err(format_err(14, "feature dim d = 0"));
    }
    Ok(EmbeddingHeader {
        version: bytes[8],
        dtype,
        n,
        d,
    })
}

/// Serializes `features` in the given dtype. f64 values that overflow f32
/// are rejected rather than written as infinities.
pub fn encode_embedding(features: &Matrix, dtype: Dtype) -> Result<Vec<u8>> {
    let (n, d) = features.shape();
    if n == 0 || d == 0 {
        return Err(Error::shape("encode_embedding", "a non-empty matrix", features.shape_string()));
    }
    let n32 = u32::try_from(n).map_err(|_| Error::Config(format!("n = {n} does not fit in u32")))?;
    let d32 = u32::try_from(d).map_err(|_| Error::Config(format!("d = {d} does not fit in u32")))?;
    let mut out = Vec::with_capacity(HEADER_LEN + n * d * dtype.width());
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.push(EMBEDDING_VERSION);
    out.push(dtype.code());
    out.extend_from_slice(&n32.to_le_bytes());
    out.extend_from_slice(&d32.to_le_bytes());
    for (i, &v) in features.data().iter().enumerate() {
        match dtype {
            Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
            Dtype::F32 => {
                let narrowed = v as f32;
                if !narrowed.is_finite() {
                    return Err(Error::NonFinite(format!("entry ({}, {}) = {v} overflows f32", i / d, i % d)));
                }
                out.extend_from_slice(&narrowed.to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Decodes a whole file image. f32 payloads are widened to f64.
pub fn decode_embedding(bytes: &[u8]) -> Result<Matrix> {
    let header = decode_header(bytes)?;
    let expected = header.payload_len();
    let actual = (bytes.len() - HEADER_LEN) as u64;
    if actual < expected {
        return Err(format_err(
            bytes.len(),
            format!("truncated payload: expected {expected} bytes, found {actual}"),
        ));
    }
    if actual > expected {
        return Err(format_err(
            HEADER_LEN + expected as usize,
            format!("{} trailing bytes after a payload of {expected} bytes", actual - expected),
        ));
    }
    let width = header.dtype.width();
    let payload = &bytes[HEADER_LEN..];
    let mut data = Vec::with_capacity(header.n as usize * header.d as usize);
    for (i, chunk) in payload.chunks_exact(width).enumerate() {
        let v = match header.dtype {
            Dtype::F64 => f64::from_le_bytes(chunk.try_into().expect("8 bytes")),
            Dtype::F32 => f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64,
        };
        if !v.is_finite() {
            return Err(format_err(HEADER_LEN + i * width, format!("non-finite value {v} in payload")));
        }
        data.push(v);
    }
    Matrix::new(header.n as usize, header.d as usize, data)
}

pub fn write_embedding(path: &Path, features: &Matrix, dtype: Dtype) -> Result<()> {
    let bytes = encode_embedding(features, dtype)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_embedding(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embedding(&bytes)
}

/// Reads only the header, for cheap dimension checks.
pub fn read_embedding_header(path: &Path) -> Result<EmbeddingHeader> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::with_capacity(HEADER_LEN);
    file.by_ref()
        .take(HEADER_LEN as u64)
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(path, e))?;
    decode_header(&buf)
}
