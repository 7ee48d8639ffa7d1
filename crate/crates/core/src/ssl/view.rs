use rand::seq::index;
use rand::Rng;

use super::EmbeddingBank;
use crate::error::{Error, Result};
use crate::sparsemap::{augment_sparse_map, build_sparse_map, sample_slide_aug, SlideAugParams, SparseMap};

/// How training views are drawn from a bank.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewConfig {
    /// Tiles per view `T`.
    pub tiles: usize,
    /// One tile augmentation for the whole view, or one per tile.
    pub shared_aug: bool,
    pub slide_aug: bool,
    pub downsample: u32,
}

/// The random choices that define one view of a slide.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSpec {
    pub slide_id: String,
    pub shared: bool,
    /// Augmentation slice of each drawn tile (all equal when shared).
    pub aug_indices: Vec<usize>,
    pub tile_indices: Vec<usize>,
    pub slide_aug: Option<SlideAugParams>,
}

fn check_tiles(bank: &EmbeddingBank, tiles: usize) -> Result<()> {
    if tiles == 0 || tiles > bank.n_tiles() {
        return Err(Error::InsufficientTiles {
            needed: tiles,
            available: bank.n_tiles(),
        });
    }
    Ok(())
}

/// Draws a training view. Augmentation slice 0 is never used here; it is
/// kept for inference.
pub fn sample_view<R: Rng + ?Sized>(bank: &EmbeddingBank, cfg: &ViewConfig, rng: &mut R) -> Result<(SparseMap, ViewSpec)> {
    check_tiles(bank, cfg.tiles)?;
    let k = bank.n_augs();
    if k < 2 {
        return Err(Error::NoTrainingAugmentations(k));
    }
    let (aug_indices, tile_indices) = if cfg.shared_aug {
        let aug = rng.random_range(1..k);
        (vec![aug; cfg.tiles], index::sample(rng, bank.n_tiles(), cfg.tiles).into_vec())
    } else {
        let tiles = index::sample(rng, bank.n_tiles(), cfg.tiles).into_vec();
        ((0..cfg.tiles).map(|_| rng.random_range(1..k)).collect(), tiles)
    };
    let slide_aug = cfg.slide_aug.then(|| sample_slide_aug(rng));
    let spec = ViewSpec {
        slide_id: bank.slide_id.clone(),
        shared: cfg.shared_aug,
        aug_indices,
        tile_indices,
        slide_aug,
    };
    Ok((build_view(bank, &spec, cfg.downsample)?, spec))
}

/// Canonical order of a slice's tiles: by coordinates, then feature bits.
/// Sampling positions in this order makes views independent of how the
/// bank happens to list its tiles.
pub fn canonical_tile_order(bank: &EmbeddingBank, aug: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..bank.n_tiles()).collect();
    order.sort_by(|&a, &b| {
        bank.coord(aug, a).cmp(&bank.coord(aug, b)).then_with(|| {
            let fa = bank.feature(aug, a).iter().map(|v| v.to_bits());
            let fb = bank.feature(aug, b).iter().map(|v| v.to_bits());
            fa.cmp(fb)
        })
    });
    order
}

/// Draws an unaugmented view: `tiles` tiles of slice 0, no slide-level
/// augmentation. `order` is the slice's canonical tile order.
pub fn sample_identity_view<R: Rng + ?Sized>(
    bank: &EmbeddingBank,
    order: &[usize],
    tiles: usize,
    downsample: u32,
    rng: &mut R,
) -> Result<(SparseMap, ViewSpec)> {
    check_tiles(bank, tiles)?;
    let mut tile_indices: Vec<usize> = index::sample(rng, bank.n_tiles(), tiles).into_iter().map(|p| order[p]).collect();
    tile_indices.sort_unstable();
    let spec = ViewSpec {
        slide_id: bank.slide_id.clone(),
        shared: true,
        aug_indices: vec![0; tiles],
        tile_indices,
        slide_aug: None,
    };
    Ok((build_view(bank, &spec, downsample)?, spec))
}

pub fn build_view(bank: &EmbeddingBank, spec: &ViewSpec, downsample: u32) -> Result<SparseMap> {
    if spec.aug_indices.len() != spec.tile_indices.len() {
        return Err(Error::DimensionMismatch {
            expected: spec.tile_indices.len(),
            found: spec.aug_indices.len(),
        });
    }
    let tiles: Vec<_> = spec
        .aug_indices
        .iter()
        .zip(&spec.tile_indices)
        .map(|(&a, &t)| bank.tile(a, t))
        .collect();
    let map = build_sparse_map(&tiles, downsample)?;
    match &spec.slide_aug {
        Some(p) => augment_sparse_map(&map, p),
        None => Ok(map),
    }
}
