//! The DMAP density map format: the magic `DMAP`, height and width as
//! little-endian `u32`, then `height * width` little-endian `f32` values in
//! row-major order.
//!
//! Values are stored in single precision, so a map survives a round trip
//! bit for bit only when all its values are representable as `f32`.

use std::fs;
use std::path::Path;

use cmtl_core::DensityMap;

use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DMAP";

pub fn to_bytes(map: &DensityMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * map.data().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(map.height() as u32).to_le_bytes());
    out.extend_from_slice(&(map.width() as u32).to_le_bytes());
    for &v in map.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Parses a DMAP buffer; `Err` carries a description of what is wrong.
pub fn from_bytes(bytes: &[u8]) -> std::result::Result<DensityMap, String> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err("not a DMAP file (bad magic)".into());
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (h, w) = (word(4), word(8));
    let want = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(12))
        .ok_or("dimensions overflow")?;
    if bytes.len() != want {
        return Err(format!("{h}x{w} map needs {want} bytes, file has {}", bytes.len()));
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    DensityMap::from_vec(h, w, data).map_err(|e| e.to_string())
}

pub fn write_dmap(path: &Path, map: &DensityMap) -> Result<()> {
    fs::write(path, to_bytes(map)).map_err(|e| Error::io(path, e))
}

pub fn read_dmap(path: &Path) -> Result<DensityMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|m| Error::format(path, m))
}
