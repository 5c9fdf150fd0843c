//! Training with accumulated gradients and the two-stage schedule.
//!
//! Each mini-batch loss is divided by `accumulate_step` and backpropagated
//! into the shared gradient buffers. After every `accumulate_step`
//! mini-batches the gradients are clipped, each unfrozen group takes one
//! Adam step, and the buffers are zeroed. The mini-batch counter runs across
//! epochs, so a window left open at the end of an epoch is completed by the
//! first batches of the next one.

use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderBackend, EncoderInput};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::{LossConfig, Reduction};
use crate::model::Model;
use crate::optim::{optimizer_update, AdamState, OptimConfig};
use crate::params::Group;
use crate::scalar::Scalar;

/// One training caption with its clip.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub id: String,
    pub input: Arc<EncoderInput<T>>,
    /// Caption ids ending in `<EOS>`.
    pub targets: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Stage {
    /// Decoder only, encoder frozen.
    One,
    /// End to end.
    Two,
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        match s {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

impl TryFrom<u8> for Stage {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            _ => Err(format!("stage must be 1 or 2, got {v}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mini_batch_size: usize,
    pub accumulate_step: usize,
    /// Epoch cap per stage.
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    /// Early stopping: evaluations without validation improvement.
    pub patience: usize,
    /// Multiplies every group's learning rate in stage 2.
    pub stage2_lr_scale: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mini_batch_size: 8,
            accumulate_step: 4,
            stage1_epochs: 50,
            stage2_epochs: 50,
            patience: 3,
            stage2_lr_scale: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mini_batch_size == 0 {
            return Err(Error::config("train.mini_batch_size", "must be at least 1"));
        }
        if self.accumulate_step == 0 {
            return Err(Error::config("train.accumulate_step", "must be at least 1"));
        }
        if self.patience == 0 {
            return Err(Error::config("train.patience", "must be at least 1"));
        }
        if !(self.stage2_lr_scale > 0.0 && self.stage2_lr_scale.is_finite()) {
            return Err(Error::config("train.stage2_lr_scale", "must be positive"));
        }
        Ok(())
    }

    pub fn effective_batch(&self) -> usize {
        self.mini_batch_size * self.accumulate_step
    }

    pub fn epochs(&self, stage: Stage) -> usize {
        match stage {
            Stage::One => self.stage1_epochs,
            Stage::Two => self.stage2_epochs,
        }
    }
}

/// Learning rate of each group for one update; `None` when frozen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRates {
    pub encoder: Option<f64>,
    pub decoder: Option<f64>,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub update_idx: usize,
    pub stage: Stage,
    pub loss_nll: f64,
    pub loss_adsa: f64,
    pub loss_total: f64,
    pub grad_norm_encoder: f64,
    pub grad_norm_decoder: f64,
    pub lr: GroupRates,
}

/// Weighted loss values summed over a window.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossSums {
    pub nll: f64,
    pub adsa: f64,
    pub total: f64,
}

impl std::ops::AddAssign for LossSums {
    fn add_assign(&mut self, o: LossSums) {
        self.nll += o.nll;
        self.adsa += o.adsa;
        self.total += o.total;
    }
}

#[derive(Clone, Debug, Default)]
pub struct StageReport {
    pub updates: Vec<UpdateRecord>,
    /// Validation NLL (mean per caption) after each epoch.
    pub val_nll: Vec<f64>,
    /// Value restored at the end, if validation ran.
    pub best_val_nll: Option<f64>,
    pub epochs_run: usize,
    /// Gradient norm of the first encoder layer at each update, pre-clip.
    pub first_layer_grad_norms: Vec<f64>,
    /// Largest |g| after clipping, per update.
    pub post_clip_max_abs: Vec<f64>,
    pub clipped_entries: usize,
}

/// Optimizer settings for `stage`: the encoder group is frozen in stage 1
/// and whenever the encoder is not trainable; stage 2 scales every
/// learning rate by `lr_scale`.
pub fn stage_optim(model_trainable: bool, optim: &OptimConfig, stage: Stage, lr_scale: f64) -> OptimConfig {
    let mut o = optim.clone();
    if stage == Stage::One || !model_trainable {
        o.encoder.frozen = true;
    }
    if stage == Stage::Two {
        o.encoder.learning_rate *= lr_scale;
        o.decoder.learning_rate *= lr_scale;
    }
    o
}

/// Forward and backward one mini-batch with every caption loss scaled by
/// `weight`, adding the gradients into `model.store`.
pub fn forward_backward<T: Scalar>(
    model: &mut Model<T>,
    batch: &[&Sample<T>],
    loss: &LossConfig,
    weight: f64,
    train_encoder: bool,
) -> Result<LossSums> {
    let mut sums = LossSums::default();
    for s in batch {
        let mut g = Graph::new();
        let parts = model.caption_loss(&mut g, &s.id, &s.input, &s.targets, loss, train_encoder, true)?;
        let scaled = g.scale(parts.total, weight);
        g.backward(scaled)?;
        model.store.accumulate_from(&g);
        sums += LossSums {
            nll: weight * g.value(parts.nll).item().as_f64(),
            adsa: weight * g.value(parts.adsa).item().as_f64(),
            total: weight * g.value(parts.total).item().as_f64(),
        };
    }
    Ok(sums)
}

/// Per-caption weight for a mini-batch of `len` captions.
pub fn batch_weight(loss: &LossConfig, len: usize, accumulate_step: usize) -> f64 {
    let per_batch = match loss.reduction {
        Reduction::Mean => len as f64,
        Reduction::Sum => 1.0,
    };
    1.0 / (per_batch * accumulate_step as f64)
}

/// Mean per-caption NLL with no gradient tracking.
pub fn evaluate_nll<T: Scalar>(model: &Model<T>, samples: &[Sample<T>], loss: &LossConfig) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::contract("evaluation on an empty split"));
    }
    let mut total = 0.0;
    for s in samples {
        let mut g = Graph::new();
        let parts = model.caption_loss(&mut g, &s.id, &s.input, &s.targets, loss, false, false)?;
        total += g.value(parts.nll).item().as_f64();
    }
    Ok(total / samples.len() as f64)
}

fn max_abs_grad<T: Scalar>(model: &Model<T>) -> f64 {
    model
        .store
        .iter()
        .flat_map(|(_, p)| p.grad.data().iter())
        .fold(0.0, |m, g| m.max(g.as_f64().abs()))
}

/// Train one stage with accumulated updates and early stopping on validation NLL.
///
/// `sink` receives every update record as it happens.
#[allow(clippy::too_many_arguments)]
pub fn accumulate_train<T: Scalar>(
    model: &mut Model<T>,
    train: &[Sample<T>],
    val: Option<&[Sample<T>]>,
    cfg: &TrainConfig,
    optim: &OptimConfig,
    loss: &LossConfig,
    stage: Stage,
    sink: &mut dyn FnMut(&UpdateRecord) -> Result<()>,
) -> Result<StageReport> {
    cfg.validate()?;
    optim.validate()?;
    loss.validate()?;
    if train.len() < cfg.mini_batch_size {
        return Err(Error::contract(format!(
            "{} training captions cannot fill a mini-batch of {}",
            train.len(),
            cfg.mini_batch_size
        )));
    }
    let trainable = model.config.encoder.trainable && model.config.encoder.backend == EncoderBackend::TinyConv;
    if stage == Stage::Two && !trainable {
        return Err(Error::config(
            "encoder.trainable",
            "stage 2 needs a trainable tiny_conv encoder",
        ));
    }
    let optim = stage_optim(trainable, optim, stage, cfg.stage2_lr_scale);
    let train_encoder = !optim.encoder.frozen;
    let rates = GroupRates {
        encoder: (!optim.encoder.frozen).then_some(optim.encoder.learning_rate),
        decoder: (!optim.decoder.frozen).then_some(optim.decoder.learning_rate),
    };
    let first_layer = model.encoder.map(|e| e.first_layer());

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u8::from(stage) as u64);
    let mut adam = AdamState::new(&model.store);
    let mut report = StageReport::default();
    let mut window = LossSums::default();
    let mut batches = 0usize;
    let mut best: Option<(f64, Vec<crate::tensor::Tensor<T>>)> = None;
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    model.store.zero_grads();

    for _epoch in 0..cfg.epochs(stage) {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.mini_batch_size) {
            let batch: Vec<&Sample<T>> = chunk.iter().map(|&i| &train[i]).collect();
            let w = batch_weight(loss, batch.len(), cfg.accumulate_step);
            window += forward_backward(model, &batch, loss, w, train_encoder)?;
            batches += 1;
            if !batches.is_multiple_of(cfg.accumulate_step) {
                continue;
            }
            let record = UpdateRecord {
                update_idx: report.updates.len(),
                stage,
                loss_nll: window.nll,
                loss_adsa: window.adsa,
                loss_total: window.total,
                grad_norm_encoder: model.store.grad_norm(Group::Encoder),
                grad_norm_decoder: model.store.grad_norm(Group::Decoder),
                lr: rates.clone(),
            };
            if let Some(id) = first_layer {
                report.first_layer_grad_norms.push(model.store.grad(id).norm().as_f64());
            }
            report.clipped_entries += optimizer_update(&mut model.store, &mut adam, &optim)?;
            report.post_clip_max_abs.push(max_abs_grad(model));
            model.store.zero_grads();
            sink(&record)?;
            report.updates.push(record);
            window = LossSums::default();
        }
        report.epochs_run += 1;

        if let Some(val) = val {
            let nll = evaluate_nll(model, val, loss)?;
            log::info!("stage {} epoch {}: val nll {nll:.5}", u8::from(stage), report.epochs_run);
            report.val_nll.push(nll);
            if best.as_ref().is_none_or(|(b, _)| nll < *b) {
                best = Some((nll, model.store.snapshot()));
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
    }
    model.store.zero_grads();
    if let Some((nll, snap)) = best {
        model.store.restore(&snap);
        report.best_val_nll = Some(nll);
    }
    Ok(report)
}

/// Replace pixel inputs by the frozen encoder's features, computing each
/// distinct clip once.
pub fn precompute_features<T: Scalar>(model: &Model<T>, samples: &[Sample<T>]) -> Result<Vec<Sample<T>>> {
    let mut cache: HashMap<*const EncoderInput<T>, Arc<EncoderInput<T>>> = HashMap::new();
    samples
        .iter()
        .map(|s| {
            let key = Arc::as_ptr(&s.input);
            let input = match cache.get(&key) {
                Some(f) => f.clone(),
                None => {
                    let f = Arc::new(EncoderInput::Features(model.features(&s.id, &s.input)?));
                    cache.insert(key, f.clone());
                    f
                }
            };
            Ok(Sample {
                id: s.id.clone(),
                input,
                targets: s.targets.clone(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, Default)]
pub struct TwoStageReport {
    pub stage1: Option<StageReport>,
    pub stage2: Option<StageReport>,
}

/// Run the requested stages in order. `on_stage_end` is called after each
/// one, e.g. to write a checkpoint.
#[allow(clippy::too_many_arguments)]
pub fn two_stage_run<T: Scalar>(
    model: &mut Model<T>,
    train: &[Sample<T>],
    val: Option<&[Sample<T>]>,
    stages: &[Stage],
    cfg: &TrainConfig,
    optim: &OptimConfig,
    loss: &LossConfig,
    sink: &mut dyn FnMut(&UpdateRecord) -> Result<()>,
    on_stage_end: &mut dyn FnMut(Stage, &Model<T>, &StageReport) -> Result<()>,
) -> Result<TwoStageReport> {
    let mut out = TwoStageReport::default();
    for &stage in stages {
        let report = match stage {
            Stage::One => {
                // the encoder is fixed, so its output is computed once
                let tr = precompute_features(model, train)?;
                let va = val.map(|v| precompute_features(model, v)).transpose()?;
                accumulate_train(model, &tr, va.as_deref(), cfg, optim, loss, stage, sink)?
            }
            Stage::Two => accumulate_train(model, train, val, cfg, optim, loss, stage, sink)?,
        };
        on_stage_end(stage, model, &report)?;
        match stage {
            Stage::One => out.stage1 = Some(report),
            Stage::Two => out.stage2 = Some(report),
        }
    }
    Ok(out)
}
