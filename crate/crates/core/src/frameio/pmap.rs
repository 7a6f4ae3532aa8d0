//! `PMAP` files: magic, u32 version, u32 H, u32 W, u32 C (all little-endian),
//! then H·W·C little-endian `f32` in (row, column, channel) order. Invalid
//! pixels are stored as all-zero channels.

use std::path::Path;

use super::{FrameIoError, ProbMap};
use crate::raster::Field;
use crate::scalar::Real;

pub const PMAP_MAGIC: &[u8; 4] = b"PMAP";
pub const PMAP_VERSION: u32 = 1;
pub const PMAP_HEADER_LEN: usize = 20;

pub fn encode_probmap<T: Real>(p: &ProbMap<T>) -> Vec<u8> {
    let values = p.values();
    let mut out = Vec::with_capacity(PMAP_HEADER_LEN + values.as_slice().len() * 4);
    out.extend_from_slice(PMAP_MAGIC);
    for v in [PMAP_VERSION, values.height() as u32, values.width() as u32, values.channels() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for (i, &valid) in p.valid().iter().enumerate() {
        for &x in values.at(i) {
            let x = if valid { x.to_f32_lossy() } else { 0.0 };
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

/// Decodes a `PMAP` buffer. A pixel is valid iff any channel is non-zero.
pub fn decode_probmap(bytes: &[u8]) -> Result<ProbMap<f32>, FrameIoError> {
    let fmt = |m: String| FrameIoError::Format(m);
    if bytes.len() < PMAP_HEADER_LEN {
        return Err(fmt(format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != PMAP_MAGIC {
        return Err(fmt(format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..4]))));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let version = word(0);
    if version != PMAP_VERSION {
        return Err(fmt(format!("unsupported version {version}")));
    }
    let (h, w, c) = (word(1) as usize, word(2) as usize, word(3) as usize);
    let n = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| fmt("dimensions overflow".into()))?;
    let payload = &bytes[PMAP_HEADER_LEN..];
    if payload.len() != n * 4 {
        return Err(fmt(format!(
            "payload is {} bytes, expected {} for {h}x{w}x{c}",
            payload.len(),
            n * 4
        )));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let values = Field::from_vec(h, w, c, data).expect("length checked");
    let valid = (0..h * w).map(|i| values.at(i).iter().any(|&x| x != 0.0)).collect();
    Ok(ProbMap::from_parts(values, valid)?)
}

pub fn write_probmap<T: Real>(p: &ProbMap<T>, path: impl AsRef<Path>) -> Result<(), FrameIoError> {
    let path = path.as_ref();
    std::fs::write(path, encode_probmap(p)).map_err(|e| FrameIoError::io(path, e))
}

pub fn read_probmap(path: impl AsRef<Path>) -> Result<ProbMap<f32>, FrameIoError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| FrameIoError::io(path, e))?;
    decode_probmap(&bytes)
}
