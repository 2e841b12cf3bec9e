//! GCRF binary tensor files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "GCRF" | version: u32 = 1 | dtype: u8 = 0 (f32) | ndim: u8 | ndim x u32 dims | f32 payload
//! ```
//!
//! The payload is row-major and must contain exactly `product(dims)` values.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{GcrError, Result};

pub const MAGIC: [u8; 4] = *b"GCRF";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

/// Size of the fixed part of the header, before the dims.
const FIXED_HEADER: usize = 4 + 4 + 1 + 1;

fn checked_len(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() || dims.len() > u8::MAX as usize {
        return Err(GcrError::ShapeMismatch(format!(
            "tensor rank must be in 1..=255, got {}",
            dims.len()
        )));
    }
    let mut len = 1usize;
    for (axis, &d) in dims.iter().enumerate() {
        if d == 0 {
            return Err(GcrError::NonpositiveDim { axis });
        }
        if d > u32::MAX as usize {
            return Err(GcrError::ShapeMismatch(format!("dim {d} does not fit in u32")));
        }
        len = len
            .checked_mul(d)
            .ok_or_else(|| GcrError::ShapeMismatch("element count overflows".into()))?;
    }
    Ok(len)
}

/// Serializes a tensor into GCRF bytes.
pub fn encode(dims: &[usize], payload: &[f32]) -> Result<Vec<u8>> {
    let expected = checked_len(dims)?;
    if expected != payload.len() {
        return Err(GcrError::DimsPayloadMismatch {
            expected,
            actual: payload.len(),
        });
    }
    let mut out = Vec::with_capacity(FIXED_HEADER + 4 * dims.len() + 4 * payload.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses a GCRF header, returning the dims and the header length in bytes.
pub fn decode_header(bytes: &[u8]) -> Result<(Vec<usize>, usize)> {
    if bytes.len() < 4 {
        return Err(GcrError::TruncatedHeader);
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(GcrError::BadMagic { found: magic });
    }
    if bytes.len() < FIXED_HEADER {
        return Err(GcrError::TruncatedHeader);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(GcrError::UnsupportedVersion(version));
    }
    if bytes[8] != DTYPE_F32 {
        return Err(GcrError::UnsupportedDtype(bytes[8]));
    }
    let ndim = bytes[9] as usize;
    let header_len = FIXED_HEADER + 4 * ndim;
    if bytes.len() < header_len {
        return Err(GcrError::TruncatedHeader);
    }
    let dims: Vec<usize> = bytes[FIXED_HEADER..header_len]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    checked_len(&dims)?;
    Ok((dims, header_len))
}

/// Parses GCRF bytes. Non-finite values are rejected with their flat index.
pub fn decode(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f32>)> {
    let (dims, header_len) = decode_header(bytes)?;
    let len = checked_len(&dims)?;
    let body = &bytes[header_len..];
    let expected = len * 4;
    if body.len() < expected {
        return Err(GcrError::TruncatedPayload {
            expected,
            found: body.len(),
        });
    }
    if body.len() > expected {
        return Err(GcrError::TrailingBytes(body.len() - expected));
    }
    let mut payload = Vec::with_capacity(len);
    for (index, c) in body.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(c.try_into().unwrap());
        if !v.is_finite() {
            return Err(GcrError::NonFinite { index });
        }
        payload.push(v);
    }
    Ok((dims, payload))
}

pub fn write_tensor(path: impl AsRef<Path>, dims: &[usize], payload: &[f32]) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(dims, payload)?;
    let file = File::create(path).map_err(|e| GcrError::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(|e| GcrError::io(path, e))?;
    w.flush().map_err(|e| GcrError::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<(Vec<usize>, Vec<f32>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| GcrError::io(path, e))?;
    decode(&bytes)
}

/// Reads only the header of a GCRF file and checks that the file length
/// matches the declared payload size.
pub fn read_tensor_dims(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let mut file = File::open(path).map_err(|e| GcrError::io(path, e))?;
    let file_len = file.metadata().map_err(|e| GcrError::io(path, e))?.len() as usize;
    let mut head = vec![0u8; FIXED_HEADER.min(file_len)];
    file.read_exact(&mut head).map_err(|e| GcrError::io(path, e))?;
    if head.len() < FIXED_HEADER {
        return decode_header(&head).map(|(d, _)| d);
    }
    let ndim = head[9] as usize;
    let mut full = head;
    full.resize(FIXED_HEADER + 4 * ndim, 0);
    if file_len < full.len() {
        return Err(GcrError::TruncatedHeader);
    }
    file.read_exact(&mut full[FIXED_HEADER..])
        .map_err(|e| GcrError::io(path, e))?;
    let (dims, header_len) = decode_header(&full)?;
    let expected = checked_len(&dims)? * 4;
    let found = file_len - header_len;
    if found < expected {
        return Err(GcrError::TruncatedPayload { expected, found });
    }
    if found > expected {
        return Err(GcrError::TrailingBytes(found - expected));
    }
    Ok(dims)
}
