//! Little-endian tensor container shared by the target-model and drafter weight files.
//!
//! Layout:
//!
//! ```text
//! magic        4 bytes ("SPDL" target model, "SPDR" drafter)
//! version      u32
//! header       HEADER_FIELDS × u32
//! records      until EOF, each:
//!                name_len u16, name bytes (utf-8), rank u8,
//!                dims u32 × rank, payload f32 × prod(dims)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_FIELDS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl TensorRecord {
    pub fn new(name: impl Into<String>, dims: Vec<u32>, data: Vec<f32>) -> Self {
        debug_assert_eq!(dims.iter().map(|&d| d as usize).product::<usize>(), data.len());
        Self {
            name: name.into(),
            dims,
            data,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightFile {
    pub magic: [u8; 4],
    pub version: u32,
    pub header: [u32; HEADER_FIELDS],
    pub tensors: Vec<TensorRecord>,
}

impl WeightFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&self.version.to_le_bytes());
        for field in self.header {
            out.extend_from_slice(&field.to_le_bytes());
        }
        for t in &self.tensors {
            let name = t.name.as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(t.dims.len() as u8);
            for d in &t.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, magic: &[u8; 4]) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes, magic)
    }

    pub fn read_from(mut r: impl Read, magic: &[u8; 4]) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes, magic)
    }

    pub fn from_bytes(bytes: &[u8], magic: &[u8; 4]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let found = cur.take(4, "magic")?;
        if found != magic {
            return Err(Error::MalformedHeader(format!(
                "expected magic {:?}, found {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(found)
            )));
        }
        let version = cur.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::MalformedHeader(format!(
                "unsupported format version {version}"
            )));
        }
        let mut header = [0u32; HEADER_FIELDS];
        for field in header.iter_mut() {
            *field = cur.u32("header field")?;
        }
        let mut tensors = Vec::new();
        while cur.pos < bytes.len() {
            let name_len = u16::from_le_bytes(cur.take(2, "name length")?.try_into().unwrap());
            let name = std::str::from_utf8(cur.take(name_len as usize, "tensor name")?)
                .map_err(|_| Error::MalformedHeader("tensor name is not utf-8".into()))?
                .to_string();
            let rank = cur.take(1, "rank")?[0];
            let dims = (0..rank)
                .map(|_| cur.u32("tensor dims"))
                .collect::<Result<Vec<_>>>()?;
            let count = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
                .ok_or_else(|| Error::MalformedHeader(format!("tensor `{name}` too large")))?;
            let payload = cur.take(count * 4, "tensor payload")?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(TensorRecord { name, dims, data });
        }
        Ok(Self {
            magic: *magic,
            version,
            header,
            tensors,
        })
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Fetches a tensor and checks its shape.
    pub fn expect(&self, name: &str, dims: &[usize]) -> Result<&[f32]> {
        let t = self
            .tensor(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        let found: Vec<usize> = t.dims.iter().map(|&d| d as usize).collect();
        if found != dims {
            return Err(Error::InvalidConfig(format!(
                "tensor `{name}` has shape {found:?}, expected {dims:?}"
            )));
        }
        Ok(&t.data)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated(format!(
                "{what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}
