//! The "CSE1" named-tensor container shared by checkpoints and external
//! feature files.
//!
//! Layout (little endian):
//! `"CSE1"`, `u32` version, `u32` record count, then per record
//! `u32` name length, UTF-8 name, `u32` dtype, `u32` rank, `u64` dims...,
//! `u64` payload offset; then the payloads. Offsets are relative to the
//! first payload byte.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CSE1";
pub const VERSION: u32 = 1;

const DTYPE_F32: u32 = 1;
const DTYPE_I64: u32 = 2;
const DTYPE_F64: u32 = 3;
const DTYPE_BYTES: u32 = 4;

#[derive(Clone, Debug, PartialEq)]
pub enum Record {
    F32 { shape: Vec<usize>, data: Vec<f32> },
    F64(Tensor),
    I64 { shape: Vec<usize>, data: Vec<i64> },
    Bytes(Vec<u8>),
}

impl Record {
    fn dtype(&self) -> u32 {
        match self {
            Record::F32 { .. } => DTYPE_F32,
            Record::F64(_) => DTYPE_F64,
            Record::I64 { .. } => DTYPE_I64,
            Record::Bytes(_) => DTYPE_BYTES,
        }
    }

    fn shape(&self) -> Vec<usize> {
        match self {
            Record::F32 { shape, .. } | Record::I64 { shape, .. } => shape.clone(),
            Record::F64(t) => t.shape().to_vec(),
            Record::Bytes(b) => vec![b.len()],
        }
    }

    fn write_payload(&self, out: &mut Vec<u8>) {
        match self {
            Record::F32 { data, .. } => data.iter().for_each(|v| out.extend(v.to_le_bytes())),
            Record::F64(t) => t.data().iter().for_each(|v| out.extend(v.to_le_bytes())),
            Record::I64 { data, .. } => data.iter().for_each(|v| out.extend(v.to_le_bytes())),
            Record::Bytes(b) => out.extend_from_slice(b),
        }
    }
}

fn elem_size(dtype: u32) -> Result<usize> {
    match dtype {
        DTYPE_F32 => Ok(4),
        DTYPE_I64 | DTYPE_F64 => Ok(8),
        DTYPE_BYTES => Ok(1),
        d => Err(Error::Malformed(format!("unknown dtype code {d}"))),
    }
}

/// Ordered collection of named records.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    records: Vec<(String, Record)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Inserts or replaces a record.
    pub fn insert(&mut self, name: impl Into<String>, record: Record) {
        let name = name.into();
        match self.records.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = record,
            None => self.records.push((name, record)),
        }
    }

    pub fn insert_tensor(&mut self, name: impl Into<String>, t: &Tensor) {
        self.insert(name, Record::F64(t.clone()));
    }

    pub fn insert_i64(&mut self, name: impl Into<String>, data: Vec<i64>) {
        self.insert(
            name,
            Record::I64 {
                shape: vec![data.len()],
                data,
            },
        );
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, r)| r)
    }

    pub fn remove(&mut self, name: &str) -> Option<Record> {
        let i = self.records.iter().position(|(n, _)| n == name)?;
        Some(self.records.remove(i).1)
    }

    fn require(&self, name: &str) -> Result<&Record> {
        self.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    /// A floating-point record as an f64 tensor (f32 is widened).
    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        match self.require(name)? {
            Record::F64(t) => Ok(t.clone()),
            Record::F32 { shape, data } => Tensor::new(shape.clone(), data.iter().map(|&v| f64::from(v)).collect()),
            _ => Err(Error::Malformed(format!("`{name}` is not a float tensor"))),
        }
    }

    pub fn i64s(&self, name: &str) -> Result<Vec<i64>> {
        match self.require(name)? {
            Record::I64 { data, .. } => Ok(data.clone()),
            _ => Err(Error::Malformed(format!("`{name}` is not an i64 tensor"))),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match self.require(name)? {
            Record::Bytes(b) => Ok(b),
            _ => Err(Error::Malformed(format!("`{name}` is not a byte blob"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = Vec::new();
        header.extend_from_slice(MAGIC);
        header.extend(VERSION.to_le_bytes());
        header.extend((self.records.len() as u32).to_le_bytes());
        let mut payload = Vec::new();
        for (name, rec) in &self.records {
            header.extend((name.len() as u32).to_le_bytes());
            header.extend_from_slice(name.as_bytes());
            header.extend(rec.dtype().to_le_bytes());
            let shape = rec.shape();
            header.extend((shape.len() as u32).to_le_bytes());
            for d in shape {
                header.extend((d as u64).to_le_bytes());
            }
            header.extend((payload.len() as u64).to_le_bytes());
            rec.write_payload(&mut payload);
        }
        header.extend(payload);
        header
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if bytes.len() < 4 {
            return Err(if MAGIC.starts_with(bytes) {
                Error::Truncated
            } else {
                Error::BadMagic
            });
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        r.pos = 4;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version(version));
        }
        let count = r.u32()? as usize;
        let mut headers = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Malformed("record name is not UTF-8".into()))?
                .to_string();
            let dtype = r.u32()?;
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(Error::Malformed(format!("`{name}` has rank {rank}")));
            }
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let offset = r.u64()? as usize;
            headers.push((name, dtype, shape, offset));
        }
        let payload = &bytes[r.pos..];
        let mut out = Container::new();
        for (name, dtype, shape, offset) in headers {
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Malformed(format!("`{name}` is too large")))?;
            let size = n
                .checked_mul(elem_size(dtype)?)
                .ok_or_else(|| Error::Malformed(format!("`{name}` is too large")))?;
            let end = offset.checked_add(size).ok_or(Error::Truncated)?;
            if end > payload.len() {
                return Err(Error::Truncated);
            }
            let raw = &payload[offset..end];
            let rec = match dtype {
                DTYPE_F32 => Record::F32 {
                    shape,
                    data: raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                },
                DTYPE_F64 => Record::F64(Tensor::new(
                    shape,
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )?),
                DTYPE_I64 => Record::I64 {
                    shape,
                    data: raw
                        .chunks_exact(8)
                        .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                },
                _ => {
                    if shape.len() != 1 {
                        return Err(Error::Malformed(format!("byte blob `{name}` must have rank 1")));
                    }
                    Record::Bytes(raw.to_vec())
                }
            };
            if out.get(&name).is_some() {
                return Err(Error::Malformed(format!("duplicate record `{name}`")));
            }
            out.records.push((name, rec));
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated)?;
        if end > self.bytes.len() {
            return Err(Error::Truncated);
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
