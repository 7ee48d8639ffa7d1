use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ViewConfig;
use crate::error::{Error, Result};
use crate::numcore::{AdamConfig, DEFAULT_PROJ_DIM};
use crate::{DEFAULT_DOWNSAMPLE, DEFAULT_TILES_PER_VIEW};

/// Everything that controls a pretraining run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub tiles: usize,
    pub batch_size: usize,
    pub temperature: f64,
    pub epochs: usize,
    pub shared_aug: bool,
    pub slide_aug: bool,
    pub adam: AdamConfig,
    pub seed: u64,
    pub downsample: u32,
    pub block_channels: Vec<usize>,
    pub kernel_size: usize,
    pub out_dim: usize,
    pub proj_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            tiles: DEFAULT_TILES_PER_VIEW,
            batch_size: 16,
            temperature: 0.5,
            epochs: 1000,
            shared_aug: true,
            slide_aug: true,
            adam: AdamConfig::default(),
            seed: 0,
            downsample: DEFAULT_DOWNSAMPLE,
            block_channels: vec![64, 64],
            kernel_size: 3,
            out_dim: 64,
            proj_dim: DEFAULT_PROJ_DIM,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("invalid value `{value}` for `{key}`")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tiles == 0 {
            return Err(Error::config("tiles must be >= 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::config(format!("batch_size must be >= 2, got {}", self.batch_size)));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if self.downsample == 0 {
            return Err(Error::config("downsample must be >= 1"));
        }
        if self.proj_dim == 0 {
            return Err(Error::config("proj_dim must be >= 1"));
        }
        self.adam.validate()
    }

    pub fn view_config(&self) -> ViewConfig {
        ViewConfig {
            tiles: self.tiles,
            shared_aug: self.shared_aug,
            slide_aug: self.slide_aug,
            downsample: self.downsample,
        }
    }

    /// Sets one field from its `key=value` spelling.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "tiles" => self.tiles = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "temperature" => self.temperature = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "shared_aug" => self.shared_aug = parse(key, value)?,
            "slide_aug" => self.slide_aug = parse(key, value)?,
            "lr" => self.adam.lr = parse(key, value)?,
            "beta1" => self.adam.beta1 = parse(key, value)?,
            "beta2" => self.adam.beta2 = parse(key, value)?,
            "adam_eps" => self.adam.eps = parse(key, value)?,
            "weight_decay" => self.adam.weight_decay = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "downsample" => self.downsample = parse(key, value)?,
            "block_channels" => {
                self.block_channels = value
                    .split(',')
                    .map(|v| parse(key, v.trim()))
                    .collect::<Result<_>>()?
            }
            "kernel_size" => self.kernel_size = parse(key, value)?,
            "out_dim" => self.out_dim = parse(key, value)?,
            "proj_dim" => self.proj_dim = parse(key, value)?,
            _ => return Err(Error::config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies a flat `key = value` text; `#` starts a comment.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key=value", n + 1)))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_str(&text)
    }

    /// The `key = value` form read by [`TrainConfig::apply_str`].
    pub fn to_kv_string(&self) -> String {
        let channels: Vec<String> = self.block_channels.iter().map(|c| c.to_string()).collect();
        format!(
            "tiles = {}\nbatch_size = {}\ntemperature = {}\nepochs = {}\nshared_aug = {}\nslide_aug = {}\n\
             lr = {}\nbeta1 = {}\nbeta2 = {}\nadam_eps = {}\nweight_decay = {}\nseed = {}\ndownsample = {}\n\
             block_channels = {}\nkernel_size = {}\nout_dim = {}\nproj_dim = {}\n",
            self.tiles,
            self.batch_size,
            self.temperature,
            self.epochs,
            self.shared_aug,
            self.slide_aug,
            self.adam.lr,
            self.adam.beta1,
            self.adam.beta2,
            self.adam.eps,
            self.adam.weight_decay,
            self.seed,
            self.downsample,
            channels.join(","),
            self.kernel_size,
            self.out_dim,
            self.proj_dim
        )
    }
}
