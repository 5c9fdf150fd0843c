//! Encoder and decoder sharing one parameter store.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{DecoderConfig, DecoderParams};
use crate::encoder::{self, EncoderBackend, EncoderConfig, EncoderInput, TinyConvParams};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::loss::{adsa_loss, nll_loss, total_loss, LossConfig};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    /// Longest caption, `<EOS>` included.
    pub max_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.decoder.feature_dim != self.encoder.feature_dim {
            return Err(Error::config(
                "model.decoder.feature_dim",
                format!("must equal encoder.feature_dim = {}", self.encoder.feature_dim),
            ));
        }
        if self.max_len == 0 {
            return Err(Error::config("model.max_len", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub decoder: DecoderParams<ParamId>,
    /// Present for the `tiny_conv` backend.
    pub encoder: Option<TinyConvParams>,
}

/// Loss components of one caption.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub nll: Var,
    pub adsa: Var,
    pub total: Var,
}

impl<T: Scalar> Model<T> {
    /// Fresh parameters. Encoder parameters are created first, then the
    /// decoder's, so the draw order is fixed by the config alone.
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let encoder = match config.encoder.backend {
            EncoderBackend::TinyConv => Some(TinyConvParams::init(&config.encoder, &mut store, rng)),
            EncoderBackend::FeatureFile => None,
        };
        let decoder = DecoderParams::init(&config.decoder, &mut store, rng);
        Ok(Model {
            config,
            store,
            decoder,
            encoder,
        })
    }

    /// Reattach handles to an existing store, e.g. one read from a checkpoint.
    pub fn from_store(config: ModelConfig, store: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let encoder = match config.encoder.backend {
            EncoderBackend::TinyConv => Some(TinyConvParams::find(&store, config.encoder.batchnorm)?),
            EncoderBackend::FeatureFile => None,
        };
        let decoder = DecoderParams::find(&store)?;
        Ok(Model {
            config,
            store,
            decoder,
            encoder,
        })
    }

    /// Encoder output on `g`. With `train_encoder` the conv stack is
    /// recorded so gradients reach it.
    pub fn encode(&self, g: &mut Graph<T>, id: &str, input: &EncoderInput<T>, train_encoder: bool) -> Result<Var> {
        encoder::encode(
            id,
            input,
            &self.config.encoder,
            self.encoder.as_ref(),
            &self.store,
            g,
            train_encoder,
        )
    }

    /// Standardize the tiny_conv layers on `inputs` when the encoder
    /// config asks for it. No-op for precomputed features.
    pub fn calibrate_encoder<'a>(&mut self, inputs: impl IntoIterator<Item = &'a EncoderInput<T>>) -> Result<()> {
        let Some(enc) = self.encoder.as_ref() else {
            return Ok(());
        };
        if !self.config.encoder.calibrate {
            return Ok(());
        }
        let pixels: Vec<&Tensor<T>> = inputs
            .into_iter()
            .filter_map(|x| match x {
                EncoderInput::Pixels(t) => Some(t),
                EncoderInput::Features(_) => None,
            })
            .collect();
        enc.calibrate(&mut self.store, &pixels)
    }

    /// Encoder output as a plain tensor.
    pub fn features(&self, id: &str, input: &EncoderInput<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let v = self.encode(&mut g, id, input, false)?;
        Ok(g.value(v).clone())
    }

    /// Build the teacher-forced loss for one caption on `g`.
    pub fn caption_loss(
        &self,
        g: &mut Graph<T>,
        id: &str,
        input: &EncoderInput<T>,
        targets: &[usize],
        loss: &LossConfig,
        train_encoder: bool,
        train_decoder: bool,
    ) -> Result<LossVars> {
        let v = self.encode(g, id, input, train_encoder)?;
        let p = self.decoder.bind(&self.store, g, train_decoder);
        let rollout = crate::decoder::teacher_forced_rollout(g, v, targets, &p, self.config.max_len)?;
        let nll = nll_loss(g, &rollout.probs, targets)?;
        let adsa = adsa_loss(g, &rollout.alphas, loss.adsa_normalizer, self.config.decoder.feature_dim)?;
        let total = total_loss(g, nll, adsa, loss)?;
        Ok(LossVars { nll, adsa, total })
    }

    /// Same model in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            decoder: self.decoder,
            encoder: self.encoder,
        }
    }
}
