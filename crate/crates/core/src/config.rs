//! Run configuration shared by every subcommand.
//!
//! One JSON document drives the whole pipeline; unspecified fields take
//! the defaults below, flags override loaded values, and each command
//! writes the resolved result next to its outputs so any run can be
//! replayed from its artifacts alone.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SplitSpec;
use crate::error::{CoreError, Result};
use crate::forecaster::{parse_aggregation, parse_mode, ForecastConfig};
use crate::forecaster::train::TrainOptions;
use crate::pretrain::{PiEncoderConfig, PretrainOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Input series, .pmxt or .csv.
    pub data: Option<PathBuf>,
    /// Directory receiving checkpoints, logs and reports.
    pub out_dir: PathBuf,
    /// Pre-trained encoder checkpoint for train and transfer; defaults to
    /// `out_dir`/piencoder when absent.
    pub encoder_dir: Option<PathBuf>,
    /// Forecaster checkpoint for eval; defaults to `out_dir`/forecaster.
    pub checkpoint_dir: Option<PathBuf>,

    /// Forecaster input window; must equal `patch_len`.
    pub t_in: usize,
    pub horizon: usize,
    /// Encoder patch length L.
    pub patch_len: usize,
    /// Pre-training history length, a multiple of `patch_len`.
    pub t_long: usize,
    /// Encoder latent width D.
    pub latent_dim: usize,
    pub d_model: usize,
    pub d_pe: usize,
    pub d_emb: usize,
    pub d_ctx: usize,
    pub spatial_layers: usize,
    pub mask_ratio: f64,

    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub patience: usize,
    pub dropout: f64,
    pub stride: usize,
    pub val_stride: usize,
    pub max_train_windows: usize,
    pub target_train_mae: f64,

    pub pretrain_lr: f64,
    pub pretrain_batch: usize,
    pub pretrain_epochs: usize,
    pub pretrain_dropout: f64,
    pub pretrain_stride: usize,
    /// Early-stop target for the epoch-mean reconstruction MSE; 0 disables.
    pub target_recon_mse: f64,
    /// Continue pre-training from the checkpoint already in `out_dir`.
    pub resume: bool,

    pub seed: u64,
    pub no_pretrain: bool,
    pub no_cl: bool,
    pub no_context: bool,
    pub no_stpe: bool,
    pub spatial_mode: String,
    pub aggregation: String,
    pub mape_threshold: f64,

    pub nodes: usize,
    pub days: usize,
    pub steps_per_day: usize,
    pub noise_sigma: f64,

    pub split: SplitSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: None,
            out_dir: PathBuf::from("premixer-run"),
            encoder_dir: None,
            checkpoint_dir: None,
            t_in: 12,
            horizon: 12,
            patch_len: 12,
            t_long: 672,
            latent_dim: 96,
            d_model: 32,
            d_pe: 16,
            d_emb: 32,
            d_ctx: 64,
            spatial_layers: 2,
            mask_ratio: 0.5,
            lr: 0.005,
            batch: 32,
            epochs: 100,
            patience: 10,
            dropout: 0.1,
            stride: 1,
            val_stride: 1,
            max_train_windows: 0,
            target_train_mae: 0.0,
            pretrain_lr: 1e-3,
            pretrain_batch: 8,
            pretrain_epochs: 20,
            pretrain_dropout: 0.0,
            pretrain_stride: 1,
            target_recon_mse: 0.0,
            resume: false,
            seed: 0,
            no_pretrain: false,
            no_cl: false,
            no_context: false,
            no_stpe: false,
            spatial_mode: "structured".into(),
            aggregation: "mean".into(),
            mape_threshold: 1.0,
            nodes: 50,
            days: 28,
            steps_per_day: 96,
            noise_sigma: 2.0,
            split: SplitSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CoreError::Config(format!("parsing {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| CoreError::Config(format!("serializing config: {e}")))?;
        std::fs::write(path, json + "\n").map_err(|e| CoreError::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_in != self.patch_len {
            return Err(CoreError::Config(format!(
                "t_in {} must equal patch_len {}: the forecaster folds exactly one \
                 encoder patch per node, so align the input window with L",
                self.t_in, self.patch_len
            )));
        }
        if self.patch_len == 0 || self.t_long % self.patch_len != 0 {
            return Err(CoreError::Config(format!(
                "t_long {} must be a positive multiple of patch_len {}",
                self.t_long, self.patch_len
            )));
        }
        if !(0.0 < self.mask_ratio && self.mask_ratio < 1.0) {
            return Err(CoreError::Config(format!(
                "mask_ratio must lie strictly between 0 and 1, got {}",
                self.mask_ratio
            )));
        }
        if self.mape_threshold < 0.0 {
            return Err(CoreError::Config(
                "mape_threshold cannot be negative".into(),
            ));
        }
        parse_mode(&self.spatial_mode)?;
        parse_aggregation(&self.aggregation)?;
        self.split.boundaries(10)?;
        Ok(())
    }

    pub fn piencoder_config(&self, channels: usize) -> PiEncoderConfig {
        PiEncoderConfig::new(
            self.patch_len,
            channels,
            self.latent_dim,
            self.pretrain_dropout,
        )
    }

    pub fn pretrain_options(&self) -> PretrainOptions {
        PretrainOptions {
            epochs: self.pretrain_epochs,
            batch: self.pretrain_batch,
            lr: self.pretrain_lr,
            mask_ratio: self.mask_ratio,
            stride: self.pretrain_stride,
            use_cl: !self.no_cl,
            seed: self.seed,
            t_long: self.t_long,
            target_recon_mse: (self.target_recon_mse > 0.0).then_some(self.target_recon_mse),
        }
    }

    pub fn forecast_config(&self, n_nodes: usize, channels: usize) -> Result<ForecastConfig> {
        Ok(ForecastConfig {
            t_in: self.t_in,
            horizon: self.horizon,
            channels,
            n_nodes,
            d_model: self.d_model,
            d_pe: self.d_pe,
            d_emb: self.d_emb,
            d_ctx: self.d_ctx,
            spatial_layers: self.spatial_layers,
            dropout: self.dropout,
            spatial_mode: parse_mode(&self.spatial_mode)?,
            aggregation: parse_aggregation(&self.aggregation)?,
            no_pretrain: self.no_pretrain,
            no_context: self.no_context,
            no_stpe: self.no_stpe,
        })
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            batch: self.batch,
            lr: self.lr,
            patience: self.patience,
            seed: self.seed,
            stride: self.stride,
            val_stride: self.val_stride,
            max_train_windows: self.max_train_windows,
            target_train_mae: self.target_train_mae,
        }
    }
}
