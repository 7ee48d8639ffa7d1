//! Contrastive pretraining of the pooling network on frozen tile-embedding
//! banks.

mod bank;
mod config;
mod model;
mod ntxent;
mod trainer;
mod view;

pub use bank::{list_banks, load_bank, save_bank, slide_id_of, EmbeddingBank};
pub use config::TrainConfig;
pub use model::{CheckpointHeader, Model};
pub use ntxent::{nt_xent, partner};
pub use trainer::{
    epoch_rng, load_banks, loss_log_csv, pretrain, train_epoch, train_step, PretrainPaths, TrainReport, Trainer,
};
pub use view::{build_view, canonical_tile_order, sample_identity_view, sample_view, ViewConfig, ViewSpec};
