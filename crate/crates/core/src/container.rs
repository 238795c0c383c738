//! Versioned binary container shared by checkpoints, maps, indices and
//! datasets.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "RAYLOC\0\x01"
//! version  u32
//! kind     u32 length + UTF-8
//! count    u32
//! records  count × { name: u32 len + UTF-8, tag: u8, payload }
//! ```
//!
//! Payloads: tag 0 = f64 tensor (`u32 ndim`, `u64` extents, raw f64),
//! tag 1 = u64 array (`u64 len`, values), tag 2 = UTF-8 text (`u64 len`, bytes).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"RAYLOC\0\x01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    Tensor(Tensor),
    U64(Vec<u64>),
    Text(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub version: u32,
    records: Vec<(String, Record)>,
    index: BTreeMap<String, usize>,
}

impl Container {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            version: FORMAT_VERSION,
            records: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn records(&self) -> &[(String, Record)] {
        &self.records
    }

    pub fn push(&mut self, name: impl Into<String>, record: Record) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.records[i].1 = record;
        } else {
            self.index.insert(name.clone(), self.records.len());
            self.records.push((name, record));
        }
    }

    pub fn put_tensor(&mut self, name: impl Into<String>, t: Tensor) {
        self.push(name, Record::Tensor(t));
    }

    pub fn put_u64s(&mut self, name: impl Into<String>, v: Vec<u64>) {
        self.push(name, Record::U64(v));
    }

    pub fn put_u64(&mut self, name: impl Into<String>, v: u64) {
        self.push(name, Record::U64(vec![v]));
    }

    pub fn put_f64s(&mut self, name: impl Into<String>, v: Vec<f64>) {
        self.push(name, Record::Tensor(Tensor::vector(v)));
    }

    pub fn put_text(&mut self, name: impl Into<String>, s: impl Into<String>) {
        self.push(name, Record::Text(s.into()));
    }

    pub fn get(&self, name: &str) -> Result<&Record> {
        self.index
            .get(name)
            .map(|&i| &self.records[i].1)
            .ok_or_else(|| Error::Format(format!("{} container has no record {name:?}", self.kind)))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        match self.get(name)? {
            Record::Tensor(t) => Ok(t),
            _ => Err(Error::Format(format!("record {name:?} is not a tensor"))),
        }
    }

    pub fn f64s(&self, name: &str) -> Result<&[f64]> {
        Ok(self.tensor(name)?.data())
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match self.get(name)? {
            Record::U64(v) => Ok(v),
            _ => Err(Error::Format(format!("record {name:?} is not a u64 array"))),
        }
    }

    pub fn u64(&self, name: &str) -> Result<u64> {
        match self.u64s(name)? {
            [v] => Ok(*v),
            other => Err(Error::Format(format!(
                "record {name:?} holds {} values, expected 1",
                other.len()
            ))),
        }
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        match self.get(name)? {
            Record::Text(s) => Ok(s),
            _ => Err(Error::Format(format!("record {name:?} is not text"))),
        }
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!(
                "expected a {kind} file, found {}",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        write_str32(&mut out, &self.kind);
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, rec) in &self.records {
            write_str32(&mut out, name);
            match rec {
                Record::Tensor(t) => {
                    out.push(0);
                    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
                    for &e in t.shape() {
                        out.extend_from_slice(&(e as u64).to_le_bytes());
                    }
                    for v in t.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Record::U64(v) => {
                    out.push(1);
                    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                Record::Text(s) => {
                    out.push(2);
                    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
                    out.extend_from_slice(s.as_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format version {version}"
            )));
        }
        let kind = r.str32()?;
        let mut c = Container::new(&kind);
        c.version = version;
        let count = r.u32()?;
        for _ in 0..count {
            let name = r.str32()?;
            let rec = match r.u8()? {
                0 => {
                    let ndim = r.u32()? as usize;
                    let shape = (0..ndim)
                        .map(|_| r.u64().map(|v| v as usize))
                        .collect::<Result<Vec<_>>>()?;
                    let n = shape.iter().try_fold(1usize, |a, &b| a.checked_mul(b));
                    let n = n.ok_or_else(|| Error::Format("tensor too large".into()))?;
                    let raw = r.take(
                        n.checked_mul(8)
                            .ok_or_else(|| Error::Format("tensor too large".into()))?,
                    )?;
                    let data = raw
                        .chunks_exact(8)
                        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                        .collect();
                    Record::Tensor(Tensor::new(shape, data)?)
                }
                1 => {
                    let n = r.u64()? as usize;
                    let raw = r.take(
                        n.checked_mul(8)
                            .ok_or_else(|| Error::Format("array too large".into()))?,
                    )?;
                    Record::U64(
                        raw.chunks_exact(8)
                            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
                            .collect(),
                    )
                }
                2 => {
                    let n = r.u64()? as usize;
                    let raw = r.take(n)?;
                    Record::Text(
                        String::from_utf8(raw.to_vec())
                            .map_err(|_| Error::Format("invalid UTF-8 in text record".into()))?,
                    )
                }
                t => return Err(Error::Format(format!("unknown record tag {t}"))),
            };
            c.push(name, rec);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after last record".into()));
        }
        Ok(c)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn write_str32(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("unexpected end of file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str32(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format("invalid UTF-8 name".into()))
    }
}
