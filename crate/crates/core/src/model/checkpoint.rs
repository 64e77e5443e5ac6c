//! Named tensor tables in the raster container (dtype tag `0x10`).
//!
//! After the 21-byte header (`bands` = entry count, `height` = `width` = 0)
//! each entry is `u32 name_len`, UTF-8 name, `u32 rank`, `rank × u32` dims and
//! the f64 little-endian payload.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::data::raster::{DType, RasterHeader, HEADER_LEN};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MAX_NAME_LEN: usize = 256;
pub const MAX_RANK: usize = 8;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: IndexMap<String, Tensor>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.at;
        if n > remaining {
            return Err(Error::Format(format!(
                "truncated checkpoint: {what} needs {n} bytes at offset {}, {remaining} left",
                self.at
            )));
        }
        let out = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    /// Fetches a tensor, failing with a format error naming it when absent.
    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor `{name}`")))
    }

    /// Entries whose names start with `prefix`, with the prefix removed.
    pub fn with_prefix(&self, prefix: &str) -> Checkpoint {
        let tensors = self
            .tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
            .collect();
        Checkpoint { tensors }
    }

    /// Adds every entry of `other` under `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &Checkpoint) {
        for (n, t) in &other.tensors {
            self.tensors.insert(format!("{prefix}{n}"), t.clone());
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let count = u32::try_from(self.tensors.len())
            .map_err(|_| Error::Format("too many checkpoint entries".into()))?;
        let header = RasterHeader {
            bands: count,
            height: 0,
            width: 0,
            dtype: DType::TensorTable,
        };
        let mut out = header.encode().to_vec();
        for (name, t) in &self.tensors {
            if name.is_empty() || name.len() > MAX_NAME_LEN {
                return Err(Error::Format(format!("tensor name `{name}` length out of range")));
            }
            if t.rank() > MAX_RANK {
                return Err(Error::Format(format!("tensor `{name}` rank {} above {MAX_RANK}", t.rank())));
            }
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::Format(format!("tensor `{name}` dim too large")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f64).to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Decodes a table. Every length is bounded by the bytes remaining, and
    /// trailing bytes, duplicate names and zero dims are rejected.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let header = RasterHeader::decode(bytes)?;
        if header.dtype != DType::TensorTable {
            return Err(Error::Format(format!("expected a tensor table, found {:?} raster", header.dtype)));
        }
        if header.height != 0 || header.width != 0 {
            return Err(Error::Format("tensor table header must have zero height and width".into()));
        }
        let mut r = Reader { bytes, at: HEADER_LEN };
        let mut tensors = IndexMap::new();
        for _ in 0..header.bands {
            let name_len = r.u32("name length")?;
            if name_len == 0 || name_len > MAX_NAME_LEN {
                return Err(Error::Format(format!("tensor name length {name_len} out of range")));
            }
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32("rank")?;
            if rank == 0 || rank > MAX_RANK {
                return Err(Error::Format(format!("tensor `{name}` rank {rank} out of range")));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut numel = 1usize;
            for _ in 0..rank {
                let d = r.u32("dims")?;
                if d == 0 {
                    return Err(Error::Format(format!("tensor `{name}` has a zero dimension")));
                }
                numel = numel
                    .checked_mul(d)
                    .ok_or_else(|| Error::Format(format!("tensor `{name}` dimensions overflow")))?;
                shape.push(d);
            }
            let len = numel
                .checked_mul(8)
                .ok_or_else(|| Error::Format(format!("tensor `{name}` dimensions overflow")))?;
            let payload = r.take(len, "payload")?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as Scalar)
                .collect();
            if tensors.contains_key(&name) {
                return Err(Error::Format(format!("duplicate tensor `{name}`")));
            }
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        if r.at != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after tensor table", bytes.len() - r.at)));
        }
        Ok(Checkpoint { tensors })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::decode(&fs::read(path)?).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }
}
