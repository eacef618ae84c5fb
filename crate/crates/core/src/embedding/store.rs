//! Binary embedding file.
//!
//! Layout, all integers little-endian:
//!
//! | field   | type      | notes                               |
//! |---------|-----------|-------------------------------------|
//! | magic   | `[u8; 4]` | `VIRE`                              |
//! | version | `u16`     | currently 1                         |
//! | dim     | `u32`     | row length                          |
//! | count   | `u64`     | number of rows                      |
//! | dtype   | `u8`      | 1 = f32, 2 = f64                    |
//! | rows    | count×dim | row-major values of the dtype       |
//! | ids     | count×    | `u32` byte length + UTF-8 bytes     |

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{Embedding, EmbeddingError};
use crate::fsio;
use crate::scalar::Scalar;

pub const STORE_MAGIC: &[u8; 4] = b"VIRE";
pub const STORE_VERSION: u16 = 1;

/// Scalars with an on-disk dtype code.
pub trait StoredScalar: Scalar {
    const DTYPE: u8;
    const WIDTH: usize;
    fn put_le(self, out: &mut Vec<u8>);
    fn get_le(bytes: &[u8]) -> Self;
}

impl StoredScalar for f32 {
    const DTYPE: u8 = 1;
    const WIDTH: usize = 4;
    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl StoredScalar for f64 {
    const DTYPE: u8 = 2;
    const WIDTH: usize = 8;
    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Row-major table of vectors with one id per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore<T> {
    dim: usize,
    ids: Vec<String>,
    data: Vec<T>,
}

impl<T: StoredScalar> EmbeddingStore<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ids: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn from_parts(dim: usize, ids: Vec<String>, data: Vec<T>) -> Result<Self, EmbeddingError> {
        if data.len() != ids.len() * dim {
            return Err(EmbeddingError::Format(format!(
                "{} values do not fill {} rows of dim {}",
                data.len(),
                ids.len(),
                dim
            )));
        }
        Ok(Self { dim, ids, data })
    }

    pub fn push(&mut self, id: impl Into<String>, row: &Embedding<T>) -> Result<(), EmbeddingError> {
        row.check_dim(self.dim)?;
        self.ids.push(id.into());
        self.data.extend_from_slice(row.values());
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn into_parts(self) -> (usize, Vec<String>, Vec<T>) {
        (self.dim, self.ids, self.data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(19 + self.data.len() * T::WIDTH);
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        out.push(T::DTYPE);
        for &v in &self.data {
            v.put_le(&mut out);
        }
        for id in &self.ids {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EmbeddingError> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != STORE_MAGIC {
            return Err(EmbeddingError::Format("bad magic".into()));
        }
        let version = u16::from_le_bytes(cur.take(2)?.try_into().expect("2 bytes"));
        if version != STORE_VERSION {
            return Err(EmbeddingError::Format(format!("unsupported version {version}")));
        }
        let dim = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes")) as usize;
        let count = u64::from_le_bytes(cur.take(8)?.try_into().expect("8 bytes")) as usize;
        let dtype = cur.take(1)?[0];
        if dtype != T::DTYPE {
            return Err(EmbeddingError::Format(format!(
                "dtype code {dtype}, expected {}",
                T::DTYPE
            )));
        }
        let n_values = count
            .checked_mul(dim)
            .ok_or_else(|| EmbeddingError::Format("row table overflows".into()))?;
        let raw = cur.take(n_values.saturating_mul(T::WIDTH))?;
        let data: Vec<T> = raw.chunks_exact(T::WIDTH).map(T::get_le).collect();
        let mut ids = Vec::with_capacity(count);
        for _ in 0..count {
            let len = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes")) as usize;
            let id = std::str::from_utf8(cur.take(len)?)
                .map_err(|e| EmbeddingError::Format(format!("id is not UTF-8: {e}")))?;
            ids.push(id.to_owned());
        }
        if cur.pos != bytes.len() {
            return Err(EmbeddingError::Format(format!(
                "{} trailing bytes",
                bytes.len() - cur.pos
            )));
        }
        Ok(Self { dim, ids, data })
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&self.to_bytes())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, EmbeddingError> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)
            .map_err(|e| EmbeddingError::Format(e.to_string()))?;
        Self::from_bytes(&buf)
    }

    pub fn save(&self, path: &Path) -> Result<(), EmbeddingError> {
        fsio::write_atomic(path, &self.to_bytes()).map_err(|source| EmbeddingError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, EmbeddingError> {
        let bytes = fs::read(path).map_err(|source| EmbeddingError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], EmbeddingError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| EmbeddingError::Format("truncated file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
}
