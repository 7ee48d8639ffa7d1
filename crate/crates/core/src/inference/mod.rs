//! Slide representations: ensembled network embeddings and the plain
//! average-of-tiles baseline.

mod embed;
mod store;

pub use embed::{average_mil_embed, embed_dataset, embed_slide, DatasetEmbedding, EmbedOptions, Failure, SlideEmbedding};
pub use store::{load_embeddings, save_embeddings, to_csv, write_csv, EmbeddingMatrix};
