use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use super::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::seeding;
use crate::ssl::{canonical_tile_order, list_banks, load_bank, sample_identity_view, slide_id_of, EmbeddingBank, Model};

#[derive(Debug, Clone, PartialEq)]
pub struct SlideEmbedding {
    pub slide_id: String,
    pub vector: Vec<f64>,
    pub views: usize,
    pub tiles: usize,
}

/// Mean of `views` unaugmented view embeddings, scaled to unit norm.
/// Views are drawn from augmentation slice 0 without slide-level
/// augmentation and run through the network with running batch-norm
/// statistics.
pub fn embed_slide<R: Rng + ?Sized>(
    bank: &EmbeddingBank,
    model: &Model,
    tiles: usize,
    views: usize,
    downsample: u32,
    rng: &mut R,
) -> Result<SlideEmbedding> {
    if views == 0 {
        return Err(Error::config("at least one view is required"));
    }
    let order = canonical_tile_order(bank, 0);
    let maps = (0..views)
        .map(|_| sample_identity_view(bank, &order, tiles, downsample, rng).map(|(m, _)| m))
        .collect::<Result<Vec<_>>>()?;
    let w = model.represent(&maps)?;
    let dim = w.cols();
    let mut mean = vec![0.0; dim];
    for r in 0..views {
        for (m, v) in mean.iter_mut().zip(w.row(r)) {
            *m += v;
        }
    }
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::DegenerateEmbedding);
    }
    Ok(SlideEmbedding {
        slide_id: bank.slide_id.clone(),
        vector: mean.into_iter().map(|v| v / norm).collect(),
        views,
        tiles,
    })
}

/// Element-wise mean of the slice-0 tile embeddings, in canonical tile
/// order.
pub fn average_mil_embed(bank: &EmbeddingBank) -> Result<Vec<f64>> {
    let order = canonical_tile_order(bank, 0);
    if order.is_empty() {
        return Err(Error::EmptyBag);
    }
    let mut mean = vec![0.0; bank.feat_dim()];
    for &t in &order {
        for (m, &v) in mean.iter_mut().zip(bank.feature(0, t)) {
            *m += f64::from(v);
        }
    }
    let n = order.len() as f64;
    Ok(mean.into_iter().map(|v| v / n).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbedOptions {
    pub tiles: usize,
    pub views: usize,
    pub downsample: u32,
    pub seed: u64,
    /// Plain tile averages instead of network embeddings.
    pub average_mil: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub slide_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEmbedding {
    pub matrix: EmbeddingMatrix,
    pub failures: Vec<Failure>,
}

fn embed_one(path: &Path, model: Option<&Model>, opts: &EmbedOptions) -> Result<Vec<f64>> {
    let bank = load_bank(path)?;
    match model {
        Some(model) if !opts.average_mil => {
            let mut rng = seeding::rng(
                seeding::derive(opts.seed, seeding::tag::EMBED),
                seeding::hash_str(&bank.slide_id),
            );
            Ok(embed_slide(&bank, model, opts.tiles, opts.views, opts.downsample, &mut rng)?.vector)
        }
        _ => average_mil_embed(&bank),
    }
}

/// Embeds every bank of `bank_dir` in parallel. Rows are ordered by slide
/// id; each slide's random stream depends only on the seed and its id.
/// Slides that fail are left out and reported.
pub fn embed_dataset(bank_dir: &Path, model: Option<&Model>, opts: &EmbedOptions) -> Result<DatasetEmbedding> {
    if model.is_none() && !opts.average_mil {
        return Err(Error::config("a model is required unless averaging tiles"));
    }
    let paths = list_banks(bank_dir)?;
    let results: Vec<(String, Result<Vec<f64>>)> = paths
        .par_iter()
        .map(|p| (slide_id_of(p), embed_one(p, model, opts)))
        .collect();
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (id, r) in results {
        match r {
            Ok(v) => {
                ids.push(id);
                rows.push(v);
            }
            Err(e) => {
                log::warn!("skipping slide {id}: {e}");
                failures.push(Failure {
                    slide_id: id,
                    error: e.to_string(),
                })
            }
        }
    }
    let dim = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != dim) {
        return Err(Error::config("slides produced embeddings of different widths"));
    }
    Ok(DatasetEmbedding {
        matrix: EmbeddingMatrix {
            ids,
            dim,
            data: rows.into_iter().flatten().collect(),
        },
        failures,
    })
}
