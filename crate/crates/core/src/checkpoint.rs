//! PAXL checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PAXL" | version: u32
//! per tensor: name_len: u16 | name: utf-8 | rank: u8 | dims: rank × u64 | values: f64 × prod(dims)
//! checksum: u64 (FNV-1a over every preceding byte)
//! ```
//!
//! There is no tensor count; the table runs until the final eight bytes.

use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::fnv1a64;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PAXL";
pub const VERSION: u32 = 1;

/// Ordered list of named tensors.
pub type NamedTensors = Vec<(String, Tensor)>;

pub fn encode(tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in tensors {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Config(format!("tensor name too long: {name}")))?;
        let rank = u8::try_from(t.rank())
            .map_err(|_| Error::Config(format!("tensor rank too large: {name}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for d in t.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = fnv1a64(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "truncated tensor table at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<NamedTensors> {
    if bytes.len() < 16 {
        return Err(Error::CorruptCheckpoint("file shorter than header".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::CorruptCheckpoint(format!(
            "unsupported version {version}"
        )));
    }
    let body_end = bytes.len() - 8;
    let stored = u64::from_le_bytes(bytes[body_end..].try_into().expect("8 bytes"));
    if fnv1a64(&bytes[..body_end]) != stored {
        return Err(Error::CorruptCheckpoint("checksum mismatch".into()));
    }
    let mut r = Reader {
        buf: &bytes[..body_end],
        pos: 8,
    };
    let mut out = Vec::new();
    while r.pos < body_end {
        let name_len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::CorruptCheckpoint("tensor name is not utf-8".into()))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data)
            .map_err(|e| Error::CorruptCheckpoint(format!("tensor {name}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn save_checkpoint(tensors: &[(String, Tensor)], path: &Path) -> Result<()> {
    let bytes = encode(tensors)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<NamedTensors> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Keeps the tensors whose name starts with `prefix`, with the prefix stripped.
pub fn strip_prefix(tensors: &[(String, Tensor)], prefix: &str) -> crate::tensor::ParamSet {
    tensors
        .iter()
        .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
        .collect()
}

pub fn with_prefix<'a>(
    prefix: &'a str,
    params: &'a crate::tensor::ParamSet,
) -> impl Iterator<Item = (String, Tensor)> + 'a {
    params
        .iter()
        .map(move |(n, t)| (format!("{prefix}{n}"), t.clone()))
}
