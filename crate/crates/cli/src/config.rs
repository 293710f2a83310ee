//! Run configuration, read from TOML. Every key is optional; omitted keys
//! take the defaults below.
//!
//! ```toml
//! out_dir = "runs/default"
//!
//! [data]
//! train = "data/train.jsonl"   # single-label training split
//! dev = "data/dev.jsonl"       # optional held-out split, labelled or annotated
//! test = "data/test.jsonl"     # optional blind split for `predict`
//!
//! [tokenizer]
//! kind = "hashed"
//! vocab_size = 8192
//!
//! [encoder]
//! width = 64
//! max_positions = 512          # chunk window L
//!
//! [chunking]
//! stride = 256                 # defaults to half the window
//!
//! [model]
//! pooling = "max"              # max | mean | first_chunk
//! dropout = 0.1
//!
//! [loss]
//! kind = "cross_entropy"       # cross_entropy | class_weighted | focal
//! focal_gamma = 2.0
//! tasks = "both"               # both | clarity_only | evasion_only
//!
//! [train]
//! learning_rate = 1e-5
//! warmup_fraction = 0.1
//! weight_decay = 0.01
//! batch_size = 8
//! max_epochs = 15
//! patience = 3
//! clip_norm = 1.0
//! seed = 42
//! folds = 7
//!
//! [report]
//! histogram_bin_width = 64
//! token_budget = 512
//!
//! [ablation]
//! fold_counts = [3, 5, 7]
//! focal_gamma = 2.0
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use clarity_core::encoder::EncoderConfig;
use clarity_core::model::{LossConfig, ModelConfig};
use clarity_core::tokenization::TokenizerConfig;
use clarity_core::training::{PipelineConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChunkingSection {
    pub stride: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportOptions {
    pub histogram_bin_width: usize,
    pub token_budget: usize,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            histogram_bin_width: 64,
            token_budget: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationOptions {
    pub fold_counts: Vec<usize>,
    /// Gamma of the focal row in the loss ablation.
    pub focal_gamma: f64,
}

impl Default for AblationOptions {
    fn default() -> Self {
        Self {
            fold_counts: vec![3, 5, 7],
            focal_gamma: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub data: DataPaths,
    pub tokenizer: TokenizerConfig,
    pub encoder: EncoderConfig,
    pub chunking: ChunkingSection,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub report: ReportOptions,
    pub ablation: AblationOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs"),
            data: DataPaths::default(),
            tokenizer: TokenizerConfig::default(),
            encoder: EncoderConfig::default(),
            chunking: ChunkingSection::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            report: ReportOptions::default(),
            ablation: AblationOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        // Relative data paths are resolved against the config file.
        if let Some(base) = path.parent() {
            for p in [&mut cfg.data.train, &mut cfg.data.dev, &mut cfg.data.test]
                .into_iter()
                .flatten()
            {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            tokenizer: self.tokenizer.clone(),
            encoder: self.encoder,
            stride: self.chunking.stride,
            model: self.model,
            loss: self.loss.clone(),
            train: self.train.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline().validate()?;
        if self.report.histogram_bin_width == 0 {
            return Err(CliError::Config("report.histogram_bin_width must be positive".into()));
        }
        if self.ablation.fold_counts.iter().any(|&k| k < 2) || self.ablation.fold_counts.is_empty() {
            return Err(CliError::Config("ablation.fold_counts must be non-empty and each >= 2".into()));
        }
        for (name, path) in [
            ("data.train", &self.data.train),
            ("data.dev", &self.data.dev),
            ("data.test", &self.data.test),
        ] {
            if let Some(p) = path {
                if !p.is_file() {
                    return Err(CliError::Config(format!("{name}: {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    /// The training split, which must be configured.
    pub fn train_path(&self) -> Result<&Path> {
        self.data
            .train
            .as_deref()
            .ok_or_else(|| CliError::Config("data.train is not set".into()))
    }
}
