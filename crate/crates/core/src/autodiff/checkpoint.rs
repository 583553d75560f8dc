//! "SCK1" parameter checkpoints.
//!
//! Layout (little-endian): magic `SCK1` | version u32 | entry count u32, then
//! per entry: name length u16 | name bytes (UTF-8) | rank u8 | extents
//! u32 × rank | f64 × product(extents).

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::Tensor;
use crate::bytes::{Reader, Truncated};

pub const MAGIC: &[u8; 4] = b"SCK1";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("missing SCK1 magic")]
    BadMagic,
    #[error("checkpoint version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated at byte {offset} (wanted {wanted} more)")]
    Truncated { offset: usize, wanted: usize },
    #[error("entry {0} has a non-UTF-8 name")]
    InvalidName(usize),
    #[error("duplicate entry name {0:?}")]
    DuplicateName(String),
    #[error("entry {name:?} is too large to encode")]
    TooLarge { name: String },
    #[error("{0} trailing bytes after last entry")]
    TrailingBytes(usize),
    #[error("missing entry {0:?}")]
    MissingEntry(String),
    #[error("entry {name:?} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
}

impl From<Truncated> for CheckpointError {
    fn from(t: Truncated) -> Self {
        Self::Truncated {
            offset: t.offset,
            wanted: t.wanted,
        }
    }
}

/// Ordered named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> Result<(), CheckpointError> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(CheckpointError::DuplicateName(name));
        }
        self.entries.push((name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Looks up `name` and checks its shape.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<&Tensor, CheckpointError> {
        let t = self
            .get(name)
            .ok_or_else(|| CheckpointError::MissingEntry(name.to_string()))?;
        if t.shape() != shape {
            return Err(CheckpointError::ShapeMismatch {
                name: name.to_string(),
                found: t.shape().to_vec(),
                expected: shape.to_vec(),
            });
        }
        Ok(t)
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn encode(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = u32::try_from(self.entries.len()).map_err(|_| CheckpointError::TooLarge {
            name: "<entry count>".into(),
        })?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.entries {
            let too_large = || CheckpointError::TooLarge { name: name.clone() };
            let len = u16::try_from(name.len()).map_err(|_| too_large())?;
            let rank = u8::try_from(t.rank()).map_err(|_| too_large())?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(rank);
            for &e in t.shape() {
                let e = u32::try_from(e).map_err(|_| too_large())?;
                out.extend_from_slice(&e.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader::new(bytes);
        if r.take(4).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let count = r.u32()? as usize;
        let mut ck = Checkpoint::new();
        for k in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| CheckpointError::InvalidName(k))?
                .to_string();
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .and_then(|n| n.checked_mul(8))
                .ok_or(CheckpointError::Truncated {
                    offset: r.position(),
                    wanted: usize::MAX,
                })?;
            let raw = r.take(n)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            let t = Tensor::new(shape, data).expect("length derived from shape");
            ck.push(name, t)?;
        }
        if r.remaining() != 0 {
            return Err(CheckpointError::TrailingBytes(r.remaining()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let bytes = self.encode()?;
        fs::write(path, bytes).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::decode(&bytes)
    }
}
