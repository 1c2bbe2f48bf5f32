//! Binary checkpoint format.
//!
//! ```text
//! "RCTT" | u32 version | u32 meta_len | meta JSON | u32 count |
//!   count x ( u32 name_len | name | u32 rank | rank x u64 extent | LE f32 payload )
//! ```
//! All integers are little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use recttt_core::Tensor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"RCTT";
pub const VERSION: u32 = 1;

/// Upper bound on a single tensor's element count; guards allocations on
/// corrupt headers.
const MAX_ELEMENTS: u64 = 1 << 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("file truncated while reading {0}")]
    Truncated(&'static str),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metadata {
    pub config_hash: String,
    pub seed: u64,
    pub epoch: usize,
    /// Full config used for training, so `eval` can rebuild matching shapes.
    #[serde(default)]
    pub config: Option<serde_json::Value>,
}

#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    pub meta: Metadata,
    /// Sorted by name, so the byte layout is a function of content only.
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(meta: Metadata) -> Self {
        Self {
            meta,
            tensors: BTreeMap::new(),
        }
    }

    /// Adds every tensor of `items` under `prefix/`.
    pub fn insert_all(&mut self, prefix: &str, items: Vec<(String, Tensor)>) {
        for (n, t) in items {
            self.tensors.insert(format!("{prefix}/{n}"), t);
        }
    }

    /// Tensors under `prefix/`, with the prefix stripped.
    pub fn group(&self, prefix: &str) -> std::collections::HashMap<String, Tensor> {
        let p = format!("{prefix}/");
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(&p).map(|s| (s.to_string(), t.clone())))
            .collect()
    }

    pub fn has_group(&self, prefix: &str) -> bool {
        let p = format!("{prefix}/");
        self.tensors.keys().any(|n| n.starts_with(&p))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let meta_len = r.u32("metadata length")? as usize;
        let meta: Metadata = serde_json::from_slice(r.take(meta_len, "metadata")?)
            .map_err(|e| CheckpointError::Malformed(format!("metadata: {e}")))?;
        let count = r.u32("tensor count")?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            let mut elements: u64 = 1;
            for _ in 0..rank {
                let e = r.u64("extent")?;
                elements = elements
                    .checked_mul(e)
                    .filter(|&n| n <= MAX_ELEMENTS)
                    .ok_or_else(|| {
                        CheckpointError::Malformed(format!("{name}: extents too large"))
                    })?;
                shape.push(e as usize);
            }
            let raw = r.take(elements as usize * 4, "payload")?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(&shape, data)
                .map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(CheckpointError::Malformed(format!(
                    "duplicate tensor {name}"
                )));
            }
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(CheckpointError::Truncated(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new(Metadata {
            config_hash: "abc".into(),
            seed: 7,
            epoch: 3,
            config: None,
        });
        c.tensors.insert(
            "a.w".into(),
            Tensor::new(&[2, 3], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5, 1e30, -2.0]).unwrap(),
        );
        c.tensors.insert("b".into(), Tensor::scalar(0.25));
        c
    }

    #[test]
    fn layout_is_pinned() {
        let b = sample().to_bytes();
        assert_eq!(&b[..4], b"RCTT");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        let meta_len = u32::from_le_bytes(b[8..12].try_into().unwrap()) as usize;
        let p = 12 + meta_len;
        assert_eq!(u32::from_le_bytes(b[p..p + 4].try_into().unwrap()), 2);
        // First tensor is "a.w" (sorted): name length 3.
        assert_eq!(u32::from_le_bytes(b[p + 4..p + 8].try_into().unwrap()), 3);
        assert_eq!(&b[p + 8..p + 11], b"a.w");
    }

    #[test]
    fn negative_zero_survives() {
        let c = Checkpoint::from_bytes(&sample().to_bytes()).unwrap();
        assert_eq!(c.tensors["a.w"].data()[1].to_bits(), (-0.0f32).to_bits());
    }
}
