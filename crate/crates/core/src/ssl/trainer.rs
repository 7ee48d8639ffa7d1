use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{list_banks, load_bank, nt_xent, sample_view, CheckpointHeader, EmbeddingBank, Model, TrainConfig};
use crate::error::{Error, Result};
use crate::numcore::adam_step;
use crate::seeding;
use crate::sparseconv::Mode;

/// One optimization step on a batch of slides: two independent views per
/// slide, contrastive loss, backward through projector and pooling
/// network, then an Adam update. Returns the loss before the update.
pub fn train_step<R: Rng + ?Sized>(model: &mut Model, batch: &[&EmbeddingBank], cfg: &TrainConfig, rng: &mut R) -> Result<f64> {
    let b = batch.len();
    if b < 2 {
        return Err(Error::config(format!("a training batch needs >= 2 slides, got {b}")));
    }
    let view_cfg = cfg.view_config();
    let mut maps = Vec::with_capacity(2 * b);
    for _ in 0..2 {
        for bank in batch {
            maps.push(sample_view(bank, &view_cfg, rng)?.0);
        }
    }
    let (pooled, trace) = model.network.forward(&model.store, &model.buffers, &maps, Mode::Train)?;
    let (z, proj_cache) = model.projector.forward(&model.store, &pooled)?;
    let (loss, gz) = nt_xent(&z, cfg.temperature)?;
    let pg = model.projector.backward(&model.store, &proj_cache, &gz)?;
    let (_, grads) = model.network.backward(&model.store, &trace, &pg.input)?;

    model.store.zero_grads();
    model.projector.accumulate(&mut model.store, &pg)?;
    for (name, g) in &grads {
        model.store.accumulate_grad(name, g)?;
    }
    adam_step(&mut model.store, &cfg.adam)?;
    model.network.update_running_stats(&mut model.buffers, &trace);
    model.store.round_to_f32();
    for s in model.buffers.values_mut() {
        s.round_to_f32();
    }
    Ok(loss)
}

/// Random stream of one epoch; a resumed run replays it exactly.
pub fn epoch_rng(seed: u64, epoch: usize) -> seeding::Rng {
    seeding::rng(seeding::derive(seed, seeding::tag::EPOCH), epoch as u64)
}

/// Shuffles the slides, splits them into batches of `batch_size` (a final
/// batch of one slide is dropped) and takes one step per batch. Returns the
/// mean batch loss.
pub fn train_epoch(model: &mut Model, banks: &[EmbeddingBank], cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    let mut rng = epoch_rng(cfg.seed, epoch);
    let mut order: Vec<usize> = (0..banks.len()).collect();
    order.shuffle(&mut rng);
    let mut total = 0.0;
    let mut steps = 0;
    for chunk in order.chunks(cfg.batch_size) {
        if chunk.len() < 2 {
            continue;
        }
        let batch: Vec<&EmbeddingBank> = chunk.iter().map(|&k| &banks[k]).collect();
        total += train_step(model, &batch, cfg, &mut rng)?;
        steps += 1;
    }
    if steps == 0 {
        return Err(Error::config("an epoch needs at least 2 slides"));
    }
    Ok(total / steps as f64)
}

/// Training state that can be checkpointed and resumed.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub losses: Vec<f64>,
}

impl Trainer {
    pub fn new(config: TrainConfig, in_channels: usize) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            model: Model::for_training(&config, in_channels)?,
            config,
            losses: Vec::new(),
        })
    }

    /// Continues a checkpointed run under `config`; the network shape comes
    /// from the checkpoint.
    pub fn resume(path: &Path, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (model, header) = Model::load(path)?;
        if header.losses.len() != header.epochs_completed {
            return Err(Error::Format("checkpoint loss history does not match its epoch count".into()));
        }
        Ok(Trainer {
            model,
            config,
            losses: header.losses,
        })
    }

    pub fn epochs_completed(&self) -> usize {
        self.losses.len()
    }

    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            network: self.model.network.config().clone(),
            proj_dim: self.model.projector.out_dim,
            train: self.config.clone(),
            epochs_completed: self.losses.len(),
            losses: self.losses.clone(),
        }
    }

    pub fn run_epoch(&mut self, banks: &[EmbeddingBank]) -> Result<f64> {
        let loss = train_epoch(&mut self.model, banks, &self.config, self.losses.len())?;
        self.losses.push(loss);
        Ok(loss)
    }

    /// Trains until `config.epochs` epochs are completed in total.
    pub fn run(&mut self, banks: &[EmbeddingBank]) -> Result<()> {
        while self.losses.len() < self.config.epochs {
            let loss = self.run_epoch(banks)?;
            log::info!("epoch {} loss {loss:.6}", self.losses.len());
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.model.save(&self.header(), path)
    }
}

/// Where `pretrain` reads and writes.
#[derive(Debug, Clone)]
pub struct PretrainPaths {
    pub bank_dir: PathBuf,
    pub checkpoint: PathBuf,
    /// `epoch,loss` CSV, rewritten with the full history.
    pub log: Option<PathBuf>,
    /// JSON summary of the run.
    pub report: Option<PathBuf>,
    /// Checkpoint to continue from.
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub n_slides: usize,
    pub epochs_completed: usize,
    pub final_loss: Option<f64>,
    pub losses: Vec<f64>,
    pub shared_aug: bool,
    pub slide_aug: bool,
    pub tiles: usize,
    pub batch_size: usize,
    pub temperature: f64,
    pub seed: u64,
}

pub fn load_banks(dir: &Path) -> Result<Vec<EmbeddingBank>> {
    list_banks(dir)?.iter().map(|p| load_bank(p)).collect()
}

pub fn loss_log_csv(losses: &[f64]) -> String {
    let mut out = String::from("epoch,loss\n");
    for (e, l) in losses.iter().enumerate() {
        let _ = writeln!(out, "{},{l}", e + 1);
    }
    out
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads every bank of `bank_dir`, trains (or resumes) and writes the
/// checkpoint, loss log and report.
pub fn pretrain(config: &TrainConfig, paths: &PretrainPaths) -> Result<TrainReport> {
    let banks = load_banks(&paths.bank_dir)?;
    if banks.len() < 2 {
        return Err(Error::config(format!(
            "pretraining needs >= 2 banks in {}, found {}",
            paths.bank_dir.display(),
            banks.len()
        )));
    }
    let f = banks[0].feat_dim();
    if let Some(b) = banks.iter().find(|b| b.feat_dim() != f) {
        return Err(Error::DimensionMismatch {
            expected: f,
            found: b.feat_dim(),
        });
    }
    let mut trainer = match &paths.resume {
        Some(p) => Trainer::resume(p, config.clone())?,
        None => Trainer::new(config.clone(), f)?,
    };
    trainer.run(&banks)?;
    trainer.save(&paths.checkpoint)?;
    if let Some(log) = &paths.log {
        write(log, &loss_log_csv(&trainer.losses))?;
    }
    let report = TrainReport {
        n_slides: banks.len(),
        epochs_completed: trainer.epochs_completed(),
        final_loss: trainer.losses.last().copied(),
        losses: trainer.losses.clone(),
        shared_aug: config.shared_aug,
        slide_aug: config.slide_aug,
        tiles: config.tiles,
        batch_size: config.batch_size,
        temperature: config.temperature,
        seed: config.seed,
    };
    if let Some(path) = &paths.report {
        let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
        write(path, &text)?;
    }
    Ok(report)
}
