//! Run configuration read from JSON.
//!
//! ```json
//! {
//!   "scalar": "f64",
//!   "data": {"manifest": "data/manifest.jsonl", "min_count": 1},
//!   "output_dir": "runs/a",
//!   "encoder": {"backend": "tiny_conv", "feature_dim": 64, "num_frames": 16},
//!   "decoder": {"hidden_dim": 32, "embed_dim": 24, "attention_dim": 32},
//!   "max_len": 20,
//!   "beam_size": 5,
//!   "loss": {"lambda": 0.70602},
//!   "optim": {"decoder": {"learning_rate": 0.0001, "weight_decay": 0.0001}},
//!   "train": {"mini_batch_size": 8, "accumulate_step": 4, "seed": 0}
//! }
//! ```
//!
//! Every section is optional except `data.manifest`; unknown keys are
//! rejected. `ETECAP_SEED` replaces `train.seed`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SynthSpec;
use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::model::ModelConfig;
use crate::optim::OptimConfig;
use crate::train::TrainConfig;

pub const SEED_ENV: &str = "ETECAP_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalarKind {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub manifest: PathBuf,
    /// Existing vocabulary file; built from the training captions if absent.
    pub vocab: Option<PathBuf>,
    pub min_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            manifest: PathBuf::new(),
            vocab: None,
            min_count: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderDims {
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub attention_dim: usize,
}

impl Default for DecoderDims {
    fn default() -> Self {
        let d = DecoderConfig::desk(0, 0);
        DecoderDims {
            hidden_dim: d.hidden_dim,
            embed_dim: d.embed_dim,
            attention_dim: d.attention_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scalar: ScalarKind,
    pub data: DataConfig,
    pub output_dir: PathBuf,
    pub encoder: EncoderConfig,
    pub decoder: DecoderDims,
    pub max_len: usize,
    pub beam_size: usize,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub synth: SynthSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scalar: ScalarKind::F64,
            data: DataConfig::default(),
            output_dir: PathBuf::from("run"),
            encoder: EncoderConfig::default(),
            decoder: DecoderDims::default(),
            max_len: 20,
            beam_size: 5,
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            train: TrainConfig::default(),
            synth: SynthSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(body: &str) -> Result<Self> {
        serde_json::from_str(body).map_err(|e| Error::config(format!("line {} column {}", e.line(), e.column()), e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&body)
    }

    /// Apply `ETECAP_SEED` if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.train.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::config(SEED_ENV, format!("not an unsigned integer: {v:?}")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.max_len == 0 {
            return Err(Error::config("max_len", "must be positive"));
        }
        if self.beam_size == 0 {
            return Err(Error::config("beam_size", "must be at least 1"));
        }
        for (f, v) in [
            ("decoder.hidden_dim", self.decoder.hidden_dim),
            ("decoder.embed_dim", self.decoder.embed_dim),
            ("decoder.attention_dim", self.decoder.attention_dim),
        ] {
            if v == 0 {
                return Err(Error::config(f, "must be positive"));
            }
        }
        self.loss.validate()?;
        self.optim.validate()?;
        self.train.validate()?;
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            decoder: DecoderConfig {
                vocab_size,
                feature_dim: self.encoder.feature_dim,
                hidden_dim: self.decoder.hidden_dim,
                embed_dim: self.decoder.embed_dim,
                attention_dim: self.decoder.attention_dim,
            },
            max_len: self.max_len,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
