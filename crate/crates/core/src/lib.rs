//! Slide-level contrastive pretraining over sparse maps of precomputed tile
//! embeddings.
//!
//! The pipeline: tile-embedding banks ([`ssl::EmbeddingBank`]) are sampled into
//! small views, placed on a lattice ([`sparsemap`]), geometrically augmented,
//! pooled by a submanifold sparse CNN ([`sparseconv`]), projected and trained
//! with NT-Xent ([`ssl`]). Trained networks produce ensembled slide embeddings
//! ([`inference`]) which are evaluated by linear probing ([`probe`]).
//! [`datagen`] builds synthetic corpora whose class signal lives only in the
//! spatial arrangement of tiles.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datagen;
pub mod error;
pub mod gradcheck;
pub mod inference;
pub mod numcore;
pub mod probe;
pub mod seeding;
pub mod selftest;
pub mod sparseconv;
pub mod sparsemap;
pub mod ssl;

pub use error::{Error, Result};

/// Lattice downsampling factor between slide pixels and sparse-map sites.
pub const DEFAULT_DOWNSAMPLE: u32 = 224;
/// Tiles sampled per view.
pub const DEFAULT_TILES_PER_VIEW: usize = 5;
/// Views ensembled per slide at inference.
pub const DEFAULT_VIEWS: usize = 50;
/// Tile-level augmentation variants stored per bank.
pub const DEFAULT_AUGS: usize = 50;
/// Tiles stored per augmentation variant.
pub const DEFAULT_BANK_TILES: usize = 256;
