//! `GSLE` embedding files.
//!
//! Layout (little-endian): magic `b"GSLE"`, `u32` version, `u32` n_slides,
//! `u32` dim, then per slide: `u32` id length, UTF-8 id, `dim × f32`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GSLE";
pub const VERSION: u32 = 1;

/// One row per slide, rows ordered as `ids`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub ids: Vec<String>,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|i| i == id)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        for v in [VERSION, self.ids.len() as u32, self.dim as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for (k, id) in self.ids.iter().enumerate() {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for &v in self.row(k) {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a GSLE embedding file (bad magic)".into()));
        }
        let mut r = Cursor { bytes, pos: 4 };
        let version = r.word()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported embedding file version {version}")));
        }
        let (n, dim) = (r.word()? as usize, r.word()? as usize);
        let mut ids = Vec::with_capacity(n.min(1 << 20));
        let mut data = Vec::with_capacity(n.saturating_mul(dim).min(1 << 24));
        for _ in 0..n {
            let len = r.word()? as usize;
            let id = std::str::from_utf8(r.take(len)?).map_err(|e| Error::Format(format!("slide id: {e}")))?;
            ids.push(id.to_string());
            for c in r.take(4 * dim)?.chunks_exact(4) {
                data.push(f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after embeddings".into()));
        }
        Ok(EmbeddingMatrix { ids, dim, data })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos.saturating_add(n))
            .ok_or_else(|| Error::Format(format!("embedding file truncated at byte {}", self.pos)))?;
        self.pos += n;
        Ok(s)
    }

    fn word(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn save_embeddings(m: &EmbeddingMatrix, path: &Path) -> Result<()> {
    fs::write(path, m.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingMatrix::from_bytes(&bytes)
}

/// `id,v0,...` rows with a header line.
pub fn to_csv(m: &EmbeddingMatrix) -> String {
    let mut out = String::from("id");
    for k in 0..m.dim {
        let _ = write!(out, ",v{k}");
    }
    out.push('\n');
    for (k, id) in m.ids.iter().enumerate() {
        out.push_str(id);
        for v in m.row(k) {
            let _ = write!(out, ",{}", *v as f32);
        }
        out.push('\n');
    }
    out
}

pub fn write_csv(m: &EmbeddingMatrix, path: &Path) -> Result<()> {
    fs::write(path, to_csv(m)).map_err(|e| Error::io(path, e))
}
