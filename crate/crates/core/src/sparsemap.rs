//! Sparse lattice maps of tile embeddings and slide-level geometric
//! augmentation.
//!
//! A [`SparseMap`] keeps its sites in canonical (sorted) order, so any two maps
//! holding the same site/feature set are equal regardless of how they were
//! assembled.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};

/// Lattice site `(i, j)`: `i` is the column, `j` the row.
pub type Site = (i64, i64);

/// One tile of a slide: top-left pixel position and its embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TileRecord {
    pub x: i64,
    pub y: i64,
    pub feature: Vec<f64>,
}

impl TileRecord {
    pub fn new(x: i64, y: i64, feature: Vec<f64>) -> Self {
        TileRecord { x, y, feature }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseMap {
    sites: Vec<Site>,
    features: Vec<f64>,
    feat_dim: usize,
}

impl SparseMap {
    /// Builds a map from sites and row-major features (one row per site).
    ///
    /// Sites must be unique and non-negative; they are re-ordered canonically.
    pub fn new(sites: Vec<Site>, features: Vec<f64>, feat_dim: usize) -> Result<Self> {
        if sites.is_empty() {
            return Err(Error::EmptyBag);
        }
        if feat_dim == 0 {
            return Err(Error::config("feature dimension must be positive"));
        }
        if features.len() != sites.len() * feat_dim {
            return Err(Error::DimensionMismatch {
                expected: sites.len() * feat_dim,
                found: features.len(),
            });
        }
        if let Some(s) = sites.iter().find(|s| s.0 < 0 || s.1 < 0) {
            return Err(Error::config(format!("negative site coordinate {s:?}")));
        }
        let mut order: Vec<usize> = (0..sites.len()).collect();
        order.sort_by_key(|&k| sites[k]);
        if order.windows(2).any(|w| sites[w[0]] == sites[w[1]]) {
            return Err(Error::config("duplicate site in sparse map"));
        }
        Ok(Self::from_order(&sites, &features, feat_dim, &order))
    }

    fn from_order(sites: &[Site], features: &[f64], feat_dim: usize, order: &[usize]) -> Self {
        let mut out_sites = Vec::with_capacity(order.len());
        let mut out_feats = Vec::with_capacity(order.len() * feat_dim);
        for &k in order {
            out_sites.push(sites[k]);
            out_feats.extend_from_slice(&features[k * feat_dim..(k + 1) * feat_dim]);
        }
        SparseMap {
            sites: out_sites,
            features: out_feats,
            feat_dim,
        }
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    /// Row-major `[len, feat_dim]` feature matrix.
    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn feature(&self, k: usize) -> &[f64] {
        &self.features[k * self.feat_dim..(k + 1) * self.feat_dim]
    }

    pub fn feat_dim(&self) -> usize {
        self.feat_dim
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    /// Shifts every site by a non-negative offset.
    pub fn translated(&self, di: i64, dj: i64) -> Result<Self> {
        let sites = self.sites.iter().map(|&(i, j)| (i + di, j + dj)).collect();
        SparseMap::new(sites, self.features.clone(), self.feat_dim)
    }

    pub fn is_origin_normalized(&self) -> bool {
        let min_i = self.sites.iter().map(|s| s.0).min();
        let min_j = self.sites.iter().map(|s| s.1).min();
        min_i == Some(0) && min_j == Some(0)
    }
}

/// Groups features by site, averaging collisions, and shifts the minimum
/// site to the origin. Returns the map and the number of entries merged into
/// each output site.
///
/// Colliding entries are summed in a canonical order (by feature bit pattern),
/// so the result does not depend on input order.
pub fn merge_sites(sites: &[Site], features: &[f64], feat_dim: usize) -> Result<(SparseMap, Vec<usize>)> {
    if sites.is_empty() {
        return Err(Error::EmptyBag);
    }
    debug_assert_eq!(features.len(), sites.len() * feat_dim);
    let row = |k: usize| &features[k * feat_dim..(k + 1) * feat_dim];
    let min_i = sites.iter().map(|s| s.0).min().unwrap_or(0);
    let min_j = sites.iter().map(|s| s.1).min().unwrap_or(0);

    let mut groups: BTreeMap<Site, Vec<usize>> = BTreeMap::new();
    for (k, &(i, j)) in sites.iter().enumerate() {
        groups.entry((i - min_i, j - min_j)).or_default().push(k);
    }

    let mut out_sites = Vec::with_capacity(groups.len());
    let mut out_feats = Vec::with_capacity(groups.len() * feat_dim);
    let mut counts = Vec::with_capacity(groups.len());
    for (site, mut members) in groups {
        out_sites.push(site);
        counts.push(members.len());
        if members.len() == 1 {
            out_feats.extend_from_slice(row(members[0]));
            continue;
        }
        members.sort_by(|&a, &b| cmp_bits(row(a), row(b)));
        let mut acc = vec![0.0; feat_dim];
        for &m in &members {
            for (a, v) in acc.iter_mut().zip(row(m)) {
                *a += v;
            }
        }
        let n = members.len() as f64;
        out_feats.extend(acc.into_iter().map(|a| a / n));
    }
    Ok((
        SparseMap {
            sites: out_sites,
            features: out_feats,
            feat_dim,
        },
        counts,
    ))
}

fn cmp_bits(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .map(|v| v.to_bits())
        .cmp(b.iter().map(|v| v.to_bits()))
}

/// Places tiles on the lattice `(floor(x/d), floor(y/d))`, averaging tiles
/// that land on the same site, then origin-normalizes.
pub fn build_sparse_map(tiles: &[TileRecord], downsample: u32) -> Result<SparseMap> {
    build_sparse_map_with_counts(tiles, downsample).map(|(m, _)| m)
}

pub fn build_sparse_map_with_counts(tiles: &[TileRecord], downsample: u32) -> Result<(SparseMap, Vec<usize>)> {
    let first = tiles.first().ok_or(Error::EmptyBag)?;
    if downsample == 0 {
        return Err(Error::config("downsample factor must be >= 1"));
    }
    let feat_dim = first.feature.len();
    if feat_dim == 0 {
        return Err(Error::config("tile features must be non-empty"));
    }
    let d = i64::from(downsample);
    let mut sites = Vec::with_capacity(tiles.len());
    let mut features = Vec::with_capacity(tiles.len() * feat_dim);
    for t in tiles {
        if t.feature.len() != feat_dim {
            return Err(Error::DimensionMismatch {
                expected: feat_dim,
                found: t.feature.len(),
            });
        }
        if t.x < 0 || t.y < 0 {
            return Err(Error::config(format!("negative tile coordinate ({}, {})", t.x, t.y)));
        }
        sites.push((t.x.div_euclid(d), t.y.div_euclid(d)));
        features.extend_from_slice(&t.feature);
    }
    merge_sites(&sites, &features, feat_dim)
}

/// Slide-level geometric augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlideAugParams {
    pub flip_x: bool,
    pub flip_y: bool,
    /// Counter-clockwise quarter turns, in `0..4`.
    pub rot_quarters: u8,
    pub scale_x: f64,
    pub scale_y: f64,
}

pub const MIN_SCALE: f64 = 0.5;
pub const MAX_SCALE: f64 = 2.0;

impl SlideAugParams {
    pub const IDENTITY: SlideAugParams = SlideAugParams {
        flip_x: false,
        flip_y: false,
        rot_quarters: 0,
        scale_x: 1.0,
        scale_y: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        let ok = |s: f64| (MIN_SCALE..=MAX_SCALE).contains(&s);
        if !ok(self.scale_x) || !ok(self.scale_y) {
            return Err(Error::config(format!(
                "slide scales must lie in [{MIN_SCALE}, {MAX_SCALE}], got ({}, {})",
                self.scale_x, self.scale_y
            )));
        }
        if self.rot_quarters > 3 {
            return Err(Error::config(format!("rot_quarters must be < 4, got {}", self.rot_quarters)));
        }
        Ok(())
    }
}

impl Default for SlideAugParams {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// Draws fair flips, a uniform quarter-turn count and independent uniform
/// per-axis scales in `[0.5, 2]`.
pub fn sample_slide_aug<R: Rng + ?Sized>(rng: &mut R) -> SlideAugParams {
    SlideAugParams {
        flip_x: rng.random_bool(0.5),
        flip_y: rng.random_bool(0.5),
        rot_quarters: rng.random_range(0..4u8),
        scale_x: rng.random_range(MIN_SCALE..=MAX_SCALE),
        scale_y: rng.random_range(MIN_SCALE..=MAX_SCALE),
    }
}

/// Applies scale, then rotation about the origin, then bounding-box flips;
/// collisions are averaged and the result is origin-normalized.
pub fn augment_sparse_map(map: &SparseMap, params: &SlideAugParams) -> Result<SparseMap> {
    params.validate()?;
    let mut sites: Vec<Site> = map
        .sites
        .iter()
        .map(|&(i, j)| {
            let si = (i as f64 * params.scale_x).floor() as i64;
            let sj = (j as f64 * params.scale_y).floor() as i64;
            let mut s = (si, sj);
            for _ in 0..params.rot_quarters {
                s = (-s.1, s.0);
            }
            s
        })
        .collect();
    if params.flip_x || params.flip_y {
        let (lo_i, hi_i) = bounds(sites.iter().map(|s| s.0));
        let (lo_j, hi_j) = bounds(sites.iter().map(|s| s.1));
        for s in &mut sites {
            if params.flip_x {
                s.0 = lo_i + hi_i - s.0;
            }
            if params.flip_y {
                s.1 = lo_j + hi_j - s.1;
            }
        }
    }
    merge_sites(&sites, &map.features, map.feat_dim).map(|(m, _)| m)
}

fn bounds(it: impl Iterator<Item = i64>) -> (i64, i64) {
    it.fold((i64::MAX, i64::MIN), |(lo, hi), v| (lo.min(v), hi.max(v)))
}
