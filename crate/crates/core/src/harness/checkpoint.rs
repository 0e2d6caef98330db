//! Versioned, checksummed container of named arrays and scalars.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "SPPCKPT\0"
//! version  u32
//! length   u64      payload byte count
//! payload  entries, sorted by name:
//!            name_len u16, name (UTF-8), kind u8, body
//!            kind 0 f64 array:  ndim u8, dims u64 x ndim, values f64 x prod(dims)
//!            kind 1 u64 array:  count u64, values u64 x count
//!            kind 2 text:       len u64, UTF-8 bytes
//!            kind 3 bytes:      len u64, raw bytes
//! checksum 32 bytes SHA-256 of everything above
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SPPCKPT\0";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8;
const CHECKSUM_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    F64 { shape: Vec<usize>, data: Vec<f64> },
    U64(Vec<u64>),
    Text(String),
    Bytes(Vec<u8>),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    entries: BTreeMap<String, Value>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &BTreeMap<String, Value> {
        &self.entries
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn put(&mut self, name: impl Into<String>, value: Value) {
        self.entries.insert(name.into(), value);
    }

    pub fn put_f64s(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.put(name, Value::F64 { shape: shape.to_vec(), data });
    }

    pub fn put_f64(&mut self, name: impl Into<String>, v: f64) {
        self.put_f64s(name, &[], vec![v]);
    }

    pub fn put_u64s(&mut self, name: impl Into<String>, v: Vec<u64>) {
        self.put(name, Value::U64(v));
    }

    pub fn put_u64(&mut self, name: impl Into<String>, v: u64) {
        self.put_u64s(name, vec![v]);
    }

    pub fn put_text(&mut self, name: impl Into<String>, v: impl Into<String>) {
        self.put(name, Value::Text(v.into()));
    }

    pub fn put_bytes(&mut self, name: impl Into<String>, v: Vec<u8>) {
        self.put(name, Value::Bytes(v));
    }

    fn get(&self, name: &str) -> Result<&Value> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no entry `{name}`")))
    }

    fn wrong(name: &str, want: &str) -> Error {
        Error::Format(format!("checkpoint entry `{name}` is not {want}"))
    }

    pub fn f64s(&self, name: &str) -> Result<(&[usize], &[f64])> {
        match self.get(name)? {
            Value::F64 { shape, data } => Ok((shape, data)),
            _ => Err(Self::wrong(name, "an f64 array")),
        }
    }

    pub fn f64(&self, name: &str) -> Result<f64> {
        match self.f64s(name)? {
            ([], [v]) => Ok(*v),
            _ => Err(Self::wrong(name, "an f64 scalar")),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match self.get(name)? {
            Value::U64(v) => Ok(v),
            _ => Err(Self::wrong(name, "a u64 array")),
        }
    }

    pub fn u64(&self, name: &str) -> Result<u64> {
        match self.u64s(name)? {
            [v] => Ok(*v),
            _ => Err(Self::wrong(name, "a u64 scalar")),
        }
    }

    pub fn usize(&self, name: &str) -> Result<usize> {
        usize::try_from(self.u64(name)?).map_err(|_| Self::wrong(name, "a usize"))
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        match self.get(name)? {
            Value::Text(v) => Ok(v),
            _ => Err(Self::wrong(name, "text")),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match self.get(name)? {
            Value::Bytes(v) => Ok(v),
            _ => Err(Self::wrong(name, "bytes")),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        for (name, value) in &self.entries {
            payload.extend_from_slice(&(name.len() as u16).to_le_bytes());
            payload.extend_from_slice(name.as_bytes());
            match value {
                Value::F64 { shape, data } => {
                    payload.push(0);
                    payload.push(shape.len() as u8);
                    for &d in shape {
                        payload.extend_from_slice(&(d as u64).to_le_bytes());
                    }
                    for v in data {
                        payload.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Value::U64(v) => {
                    payload.push(1);
                    payload.extend_from_slice(&(v.len() as u64).to_le_bytes());
                    for x in v {
                        payload.extend_from_slice(&x.to_le_bytes());
                    }
                }
                Value::Text(s) => {
                    payload.push(2);
                    payload.extend_from_slice(&(s.len() as u64).to_le_bytes());
                    payload.extend_from_slice(s.as_bytes());
                }
                Value::Bytes(b) => {
                    payload.push(3);
                    payload.extend_from_slice(&(b.len() as u64).to_le_bytes());
                    payload.extend_from_slice(b);
                }
            }
        }
        let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + CHECKSUM_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        let sum = Sha256::digest(&out);
        out.extend_from_slice(&sum);
        out
    }

    /// Parses a container; nothing is returned unless the checksum verifies.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        if bytes.len() < HEADER_LEN + CHECKSUM_LEN {
            return Err(Error::Checksum);
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Version { found: version, expected: VERSION });
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        if bytes.len() as u64 != HEADER_LEN as u64 + len + CHECKSUM_LEN as u64 {
            return Err(Error::Checksum);
        }
        let (body, sum) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
        if Sha256::digest(body).as_slice() != sum {
            return Err(Error::Checksum);
        }
        let mut r = Reader { buf: &body[HEADER_LEN..] };
        let mut entries = BTreeMap::new();
        while !r.buf.is_empty() {
            let n = r.u16()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
            let value = match r.u8()? {
                0 => {
                    let ndim = r.u8()? as usize;
                    let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
                    let count = shape
                        .iter()
                        .try_fold(1usize, |a, &d| a.checked_mul(d))
                        .ok_or_else(|| Error::Format(format!("entry `{name}` shape overflows")))?;
                    let raw = r.take(count.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?)?;
                    let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
                    Value::F64 { shape, data }
                }
                1 => {
                    let count = r.len()?;
                    let raw = r.take(count.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?)?;
                    Value::U64(raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
                }
                2 => {
                    let n = r.len()?;
                    Value::Text(
                        String::from_utf8(r.take(n)?.to_vec())
                            .map_err(|_| Error::Format(format!("entry `{name}` is not UTF-8")))?,
                    )
                }
                3 => {
                    let n = r.len()?;
                    Value::Bytes(r.take(n)?.to_vec())
                }
                k => return Err(Error::Format(format!("entry `{name}` has unknown kind {k}"))),
            };
            if entries.insert(name.clone(), value).is_some() {
                return Err(Error::Format(format!("duplicate entry `{name}`")));
            }
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.buf.len() {
            return Err(Error::Format("checkpoint payload ends early".into()));
        }
        let (a, b) = self.buf.split_at(n);
        self.buf = b;
        Ok(a)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Format("length does not fit in memory".into()))
    }
}
