//! `GSLB` tile-embedding bank files.
//!
//! Layout (little-endian): magic `b"GSLB"`, `u32` version, `u32` n_augs,
//! `u32` n_tiles, `u32` feat_dim, then for each augmentation (outer) and
//! tile (inner): `i32` x, `i32` y, `feat_dim × f32`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::sparsemap::TileRecord;

pub const MAGIC: &[u8; 4] = b"GSLB";
pub const VERSION: u32 = 1;
pub const EXTENSION: &str = "gsb";

/// Precomputed tile embeddings of one slide under `n_augs` tile-level
/// augmentations. Slice 0 is the unaugmented tile set.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBank {
    pub slide_id: String,
    n_augs: usize,
    n_tiles: usize,
    feat_dim: usize,
    coords: Vec<(i32, i32)>,
    features: Vec<f32>,
}

impl EmbeddingBank {
    /// `coords` holds `n_augs × n_tiles` entries and `features` holds
    /// `n_augs × n_tiles × feat_dim`, augmentation-major.
    pub fn new(
        slide_id: impl Into<String>,
        n_augs: usize,
        n_tiles: usize,
        feat_dim: usize,
        coords: Vec<(i32, i32)>,
        features: Vec<f32>,
    ) -> Result<Self> {
        if n_augs == 0 || n_tiles == 0 || feat_dim == 0 {
            return Err(Error::config("bank dimensions must be >= 1"));
        }
        if coords.len() != n_augs * n_tiles {
            return Err(Error::DimensionMismatch {
                expected: n_augs * n_tiles,
                found: coords.len(),
            });
        }
        if features.len() != n_augs * n_tiles * feat_dim {
            return Err(Error::DimensionMismatch {
                expected: n_augs * n_tiles * feat_dim,
                found: features.len(),
            });
        }
        if coords.iter().any(|&(x, y)| x < 0 || y < 0) {
            return Err(Error::config("tile coordinates must be >= 0"));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("tile features must be finite"));
        }
        Ok(EmbeddingBank {
            slide_id: slide_id.into(),
            n_augs,
            n_tiles,
            feat_dim,
            coords,
            features,
        })
    }

    pub fn n_augs(&self) -> usize {
        self.n_augs
    }

    pub fn n_tiles(&self) -> usize {
        self.n_tiles
    }

    pub fn feat_dim(&self) -> usize {
        self.feat_dim
    }

    pub fn coord(&self, aug: usize, tile: usize) -> (i32, i32) {
        self.coords[aug * self.n_tiles + tile]
    }

    pub fn feature(&self, aug: usize, tile: usize) -> &[f32] {
        let start = (aug * self.n_tiles + tile) * self.feat_dim;
        &self.features[start..start + self.feat_dim]
    }

    pub fn tile(&self, aug: usize, tile: usize) -> TileRecord {
        let (x, y) = self.coord(aug, tile);
        TileRecord::new(
            i64::from(x),
            i64::from(y),
            self.feature(aug, tile).iter().map(|&v| f64::from(v)).collect(),
        )
    }

    /// All tiles of one augmentation slice.
    pub fn slice(&self, aug: usize) -> Vec<TileRecord> {
        (0..self.n_tiles).map(|t| self.tile(aug, t)).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.coords.len() * 8 + self.features.len() * 4);
        out.extend_from_slice(MAGIC);
        for v in [VERSION, self.n_augs as u32, self.n_tiles as u32, self.feat_dim as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for (k, &(x, y)) in self.coords.iter().enumerate() {
            out.extend_from_slice(&x.to_le_bytes());
            out.extend_from_slice(&y.to_le_bytes());
            for v in &self.features[k * self.feat_dim..(k + 1) * self.feat_dim] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(slide_id: impl Into<String>, bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a GSLB bank (bad magic)".into()));
        }
        if bytes.len() < 20 {
            return Err(Error::CorruptBank(format!("header truncated at {} bytes", bytes.len())));
        }
        let word = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().expect("4 bytes"));
        let version = word(0);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported bank version {version}")));
        }
        let (n_augs, n_tiles, feat_dim) = (word(1) as usize, word(2) as usize, word(3) as usize);
        let record = 8 + 4 * feat_dim;
        let expected = n_augs
            .checked_mul(n_tiles)
            .and_then(|n| n.checked_mul(record))
            .and_then(|n| n.checked_add(20))
            .ok_or_else(|| Error::CorruptBank("header dimensions overflow".into()))?;
        if bytes.len() != expected {
            return Err(Error::CorruptBank(format!(
                "expected {expected} bytes for {n_augs}×{n_tiles}×{feat_dim}, found {}",
                bytes.len()
            )));
        }
        let mut coords = Vec::with_capacity(n_augs * n_tiles);
        let mut features = Vec::with_capacity(n_augs * n_tiles * feat_dim);
        for rec in bytes[20..].chunks_exact(record) {
            let x = i32::from_le_bytes(rec[0..4].try_into().expect("4 bytes"));
            let y = i32::from_le_bytes(rec[4..8].try_into().expect("4 bytes"));
            coords.push((x, y));
            features.extend(rec[8..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))));
        }
        Self::new(slide_id, n_augs, n_tiles, feat_dim, coords, features).map_err(|e| match e {
            Error::InvalidConfig(msg) => Error::CorruptBank(msg),
            other => other,
        })
    }
}

/// Slide id of a bank path: its file stem.
pub fn slide_id_of(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn save_bank(bank: &EmbeddingBank, path: &Path) -> Result<()> {
    fs::write(path, bank.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_bank(path: &Path) -> Result<EmbeddingBank> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingBank::from_bytes(slide_id_of(path), &bytes)
}

/// Bank files of a directory, sorted by slide id.
pub fn list_banks(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == EXTENSION) {
            paths.push(path);
        }
    }
    paths.sort_by_key(|p| slide_id_of(p));
    Ok(paths)
}
