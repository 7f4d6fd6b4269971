//! Versioned model archives.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "CMTL" | version | header length | header JSON {network, boundaries}
//! tensor count | per tensor: name length, name, ndims, dims.., f32 values
//! ```

use std::fs;
use std::path::Path;

use cmtl_core::data::GroupBoundaries;
use cmtl_core::model::{ModelParameters, NetworkConfig};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CMTL";
pub const FORMAT_VERSION: u32 = 1;

/// A network together with the count-group boundaries its classifier was
/// trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParameters<f32>,
    pub boundaries: Option<GroupBoundaries>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    network: NetworkConfig,
    #[serde(default)]
    boundaries: Option<GroupBoundaries>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
}

pub fn to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let header = serde_json::to_vec(&Header {
        network: ckpt.params.config().clone(),
        boundaries: ckpt.boundaries.clone(),
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + 4 * ckpt.params.num_parameters());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_u32(&mut out, header.len());
    out.extend_from_slice(&header);
    put_u32(&mut out, ckpt.params.len());
    for t in ckpt.params.named() {
        put_u32(&mut out, t.name.len());
        out.extend_from_slice(t.name.as_bytes());
        put_u32(&mut out, t.shape.len());
        for &d in t.shape {
            put_u32(&mut out, d);
        }
        for &v in t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("truncated while reading {what} at byte {}", self.pos)),
        }
    }

    fn u32(&mut self, what: &str) -> std::result::Result<usize, String> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }
}

/// Parses a checkpoint buffer; `Err` describes the first problem found.
pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Checkpoint, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION as usize {
        return Err(format!("format version {version} is not supported (expected {FORMAT_VERSION})"));
    }
    let header_len = r.u32("header length")?;
    let header: Header =
        serde_json::from_slice(r.take(header_len, "header")?).map_err(|e| format!("bad header: {e}"))?;
    let count = r.u32("tensor count")?;
    let mut named = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u32("tensor name length")?;
        let name = String::from_utf8(r.take(len, "tensor name")?.to_vec()).map_err(|_| "tensor name is not UTF-8")?;
        let ndims = r.u32("tensor rank")?;
        let shape = (0..ndims).map(|_| r.u32("tensor shape")).collect::<std::result::Result<Vec<_>, _>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| format!("tensor `{name}` is too large"))?;
        let data = r
            .take(n, &format!("tensor `{name}`"))?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        named.push((name, shape, data));
    }
    if r.pos != bytes.len() {
        return Err(format!("{} unexpected trailing bytes", bytes.len() - r.pos));
    }
    let params = ModelParameters::from_named(&header.network, named).map_err(|e| e.to_string())?;
    Ok(Checkpoint {
        params,
        boundaries: header.boundaries,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, to_bytes(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|m| Error::format(path, m))
}

/// Loads a checkpoint and insists its network matches `expected`; the first
/// missing or misshapen tensor is named in the error.
pub fn load_checkpoint_as(path: &Path, expected: &NetworkConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    let named = ckpt
        .params
        .named()
        .map(|t| (t.name.to_string(), t.shape.to_vec(), t.data.to_vec()))
        .collect();
    let params = ModelParameters::from_named(expected, named)?;
    Ok(Checkpoint {
        params,
        boundaries: ckpt.boundaries,
    })
}
