//! `GSCK` checkpoint container.
//!
//! Layout (little-endian):
//! - magic `b"GSCK"`, `u32` version
//! - `u32` header length + UTF-8 JSON header
//! - `u32` array count, then per array: `u32` name length + UTF-8 name,
//!   `u32` rank, `rank × u32` dims, `f32` data

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GSCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: String,
    pub arrays: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.header);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, t) in &self.arrays {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let r = &mut bytes;
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let header = read_str(r)?;
        let count = read_u32(r)? as usize;
        let mut arrays = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = read_str(r)?;
            let rank = read_u32(r)? as usize;
            if rank == 0 || rank > 8 {
                return Err(Error::Format(format!("array `{name}` has invalid rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(r)? as usize);
            }
            let n: usize = shape.iter().product();
            if n * 4 > r.len() {
                return Err(Error::Format(format!("array `{name}` is truncated")));
            }
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 4];
                read_exact(r, &mut b)?;
                data.push(f64::from(f32::from_le_bytes(b)));
            }
            let t = Tensor::from_vec(&shape, data).map_err(|e| Error::Format(format!("array `{name}`: {e}")))?;
            arrays.push((name, t));
        }
        if !r.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", r.len())));
        }
        Ok(Checkpoint { header, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format("unexpected end of checkpoint".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_str(r: &mut &[u8]) -> Result<String> {
    let n = read_u32(r)? as usize;
    if n > r.len() {
        return Err(Error::Format("string length exceeds checkpoint size".into()));
    }
    let mut buf = vec![0u8; n];
    read_exact(r, &mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Format("invalid UTF-8 in checkpoint".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            header: r#"{"kind":"test"}"#.into(),
            arrays: vec![
                ("a.w".into(), Tensor::from_vec(&[2, 3], vec![1.0, -2.5, 0.125, 3.0, 4.0, 5.5]).unwrap()),
                ("a.w.m".into(), Tensor::vector(vec![0.5])),
            ],
        }
    }

    #[test]
    fn round_trip() {
        let c = sample();
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(_))));
    }
}
