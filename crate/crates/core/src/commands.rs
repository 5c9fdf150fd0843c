//! Implementations behind the `etecap` subcommands.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write as _};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::beam::{beam_search, SaLstmScorer};
use crate::checkpoint;
use crate::config::{RunConfig, ScalarKind};
use crate::data::{self, Split};
use crate::decoder::DecoderConfig;
use crate::encoder::{EncoderBackend, EncoderConfig, EncoderInput};
use crate::error::{Error, Result};
use crate::dd::Dd;
use crate::gradcheck::{check_params_reference, GradCheckReport};
use crate::graph::Graph;
use crate::loss::LossConfig;
use crate::metrics::{score_all, MetricReport, ScoredCorpus};
use crate::model::{Model, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::text::{tokenize, Vocabulary};
use crate::train::{two_stage_run, Stage, TwoStageReport, UpdateRecord};

pub const RESOLVED_CONFIG: &str = "config.resolved.json";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";

/// Which stages `train` runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageSelection {
    One,
    Two,
    Both,
}

impl StageSelection {
    pub fn stages(self) -> Vec<Stage> {
        match self {
            StageSelection::One => vec![Stage::One],
            StageSelection::Two => vec![Stage::Two],
            StageSelection::Both => vec![Stage::One, Stage::Two],
        }
    }
}

pub fn stage_checkpoint_name(stage: Stage) -> &'static str {
    match stage {
        Stage::One => "stage1.ckpt",
        Stage::Two => "stage2.ckpt",
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Train per `cfg`, writing the resolved config, vocabulary, JSONL log and
/// one checkpoint per finished stage into `cfg.output_dir`.
pub fn cmd_train(cfg: &RunConfig, stages: StageSelection, resume: Option<&Path>) -> Result<TwoStageReport> {
    cfg.validate()?;
    match cfg.scalar {
        ScalarKind::F64 => train_typed::<f64>(cfg, stages, resume),
        ScalarKind::F32 => train_typed::<f32>(cfg, stages, resume),
    }
}

fn train_typed<T: Scalar>(cfg: &RunConfig, stages: StageSelection, resume: Option<&Path>) -> Result<TwoStageReport> {
    let out = &cfg.output_dir;
    create_dir(out)?;
    let resolved = out.join(RESOLVED_CONFIG);
    std::fs::write(&resolved, cfg.to_json()? + "\n").map_err(|e| Error::io(&resolved, e))?;

    let clips = data::load_manifest(&cfg.data.manifest, &cfg.encoder)?;
    let train_clips = data::split_of(&clips, Split::Train);
    let val_clips = data::split_of(&clips, Split::Val);

    let (mut model, vocab) = match resume {
        Some(path) => {
            let ck = checkpoint::load::<T>(path)?;
            let vocab = ck.vocabulary();
            let expected = cfg.model_config(vocab.len());
            if ck.header.model != expected {
                return Err(Error::Checkpoint(format!(
                    "{} was written for a different model configuration",
                    path.display()
                )));
            }
            if let Some(vpath) = &cfg.data.vocab {
                if Vocabulary::read(vpath)? != vocab {
                    return Err(Error::Checkpoint("vocabulary differs from the checkpoint".into()));
                }
            }
            (ck.model, vocab)
        }
        None => {
            let vocab = match &cfg.data.vocab {
                Some(p) => Vocabulary::read(p)?,
                None => Vocabulary::build(
                    train_clips.iter().flat_map(|c| c.tokens.iter().map(Vec::as_slice)),
                    cfg.data.min_count,
                ),
            };
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
            (Model::<T>::new(cfg.model_config(vocab.len()), &mut rng)?, vocab)
        }
    };
    vocab.write(&out.join(VOCAB_FILE))?;

    let train = data::to_samples::<T>(&train_clips, &vocab, cfg.max_len)?;
    let val = data::to_samples::<T>(&val_clips, &vocab, cfg.max_len)?;
    let val = (!val.is_empty()).then_some(val.as_slice());
    if resume.is_none() {
        model.calibrate_encoder(train.iter().map(|s| s.input.as_ref()))?;
    }

    let log_path = out.join(TRAIN_LOG);
    let mut log = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut sink = |r: &UpdateRecord| -> Result<()> {
        let mut line = serde_json::to_vec(r)?;
        line.push(b'\n');
        log.write_all(&line).map_err(|e| Error::io(&log_path, e))
    };
    let mut on_stage_end = |stage: Stage, m: &Model<T>, _: &crate::train::StageReport| -> Result<()> {
        checkpoint::save(&out.join(stage_checkpoint_name(stage)), m, &vocab, Some(stage))
    };
    two_stage_run(
        &mut model,
        &train,
        val,
        &stages.stages(),
        &cfg.train,
        &cfg.optim,
        &cfg.loss,
        &mut sink,
        &mut on_stage_end,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionLine {
    pub id: String,
    pub caption: String,
    pub score: f64,
}

/// Beam-search captions for every clip in the manifest (or one split).
pub fn cmd_caption(
    checkpoint_path: &Path,
    manifest: &Path,
    beam: usize,
    max_len: Option<usize>,
    split: Option<Split>,
) -> Result<Vec<CaptionLine>> {
    let ck = checkpoint::load::<f64>(checkpoint_path)?;
    let vocab = ck.vocabulary();
    let model = ck.model;
    let max_len = max_len.unwrap_or(model.config.max_len);
    let clips = data::load_manifest(manifest, &model.config.encoder).map_err(|e| match e {
        Error::Ingestion { id, reason } if reason.contains("expected") => Error::Checkpoint(format!(
            "manifest does not match the checkpoint's encoder ({id}: {reason})"
        )),
        other => other,
    })?;
    let mut out = Vec::new();
    for c in clips.iter().filter(|c| split.is_none_or(|s| c.split == s)) {
        let input: EncoderInput<f64> = c.encoder_input()?;
        let v = model.features(&c.id, &input)?;
        let pool = beam_search(&SaLstmScorer::new(&model, v), beam, max_len)?;
        let best = pool
            .first()
            .ok_or_else(|| Error::contract(format!("beam search returned nothing for {}", c.id)))?;
        out.push(CaptionLine {
            id: c.id.clone(),
            caption: vocab.decode_caption(&best.tokens, false),
            score: best.score,
        });
    }
    Ok(out)
}

pub fn write_jsonl<S: Serialize>(w: &mut impl std::io::Write, rows: &[S]) -> Result<()> {
    for r in rows {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io("<output>", e))?;
    }
    Ok(())
}

#[derive(Clone, Debug, Deserialize)]
struct CandidateLine {
    id: String,
    caption: String,
}

#[derive(Clone, Debug, Deserialize)]
struct ReferenceLine {
    id: String,
    captions: Vec<String>,
}

fn read_jsonl<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<R>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::ingestion(format!("{}:{}", path.display(), i + 1), e.to_string()))?,
        );
    }
    Ok(rows)
}

/// Score candidate captions against reference sets.
pub fn cmd_score(candidates: &Path, references: &Path) -> Result<MetricReport> {
    let cands: Vec<CandidateLine> = read_jsonl(candidates)?;
    let refs: Vec<ReferenceLine> = read_jsonl(references)?;
    let mut cmap = BTreeMap::new();
    for c in cands {
        if cmap.insert(c.id.clone(), tokenize(&c.caption)).is_some() {
            return Err(Error::IdMismatch(format!("duplicate candidate id {}", c.id)));
        }
    }
    let mut rmap = BTreeMap::new();
    for r in refs {
        let toks = r.captions.iter().map(|s| tokenize(s)).collect();
        if rmap.insert(r.id.clone(), toks).is_some() {
            return Err(Error::IdMismatch(format!("duplicate reference id {}", r.id)));
        }
    }
    let corpus = ScoredCorpus::align(cmap, rmap).map_err(|m| Error::IdMismatch(m.to_string()))?;
    score_all(&corpus)
}

/// References of every clip in a manifest as `{id, captions}` lines.
pub fn references_jsonl(manifest: &Path, split: Option<Split>) -> Result<Vec<serde_json::Value>> {
    Ok(data::read_manifest(manifest)?
        .into_iter()
        .filter(|e| split.is_none_or(|s| e.split == s))
        .map(|e| serde_json::json!({"id": e.id, "captions": e.captions}))
        .collect())
}

/// Generate the synthetic dataset under `dir`; returns the manifest path.
pub fn cmd_gen_data(spec: &data::SynthSpec, dir: &Path) -> Result<PathBuf> {
    create_dir(dir)?;
    let clips = data::generate_synthetic(spec)?;
    data::write_synthetic(dir, &clips)
}

/// Sizes of the gradient-check decoder.
pub fn grad_check_decoder_config() -> DecoderConfig {
    DecoderConfig {
        vocab_size: 12,
        feature_dim: 5,
        hidden_dim: 8,
        embed_dim: 6,
        attention_dim: 8,
    }
}

fn loss_value<T: Scalar>(model: &Model<T>, input: &EncoderInput<T>, targets: &[usize], loss: &LossConfig, train_encoder: bool) -> Result<T> {
    let mut g = Graph::new();
    let l = model.caption_loss(&mut g, "gradcheck", input, targets, loss, train_encoder, false)?;
    Ok(g.value(l.total).item())
}

/// Finite-difference check of `L_tot` against every decoder parameter
/// (`n = 4` frames) and, with `include_encoder`, a small conv stack.
pub fn check_grads(seed: u64, include_encoder: bool, eps: f64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dec = grad_check_decoder_config();
    let n = 4;
    let loss = LossConfig::default();
    let targets = [5, 7, 11, 4, 2];
    let mut reports = Vec::new();

    let cfg = ModelConfig {
        encoder: EncoderConfig {
            backend: EncoderBackend::FeatureFile,
            feature_dim: dec.feature_dim,
            num_frames: n,
            trainable: false,
            ..EncoderConfig::default()
        },
        decoder: dec.clone(),
        max_len: 8,
    };
    let mut model = Model::<f64>::new(cfg, &mut rng)?;
    let v = Tensor::from_f64(
        &[n, dec.feature_dim],
        &(0..n * dec.feature_dim)
            .map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0))
            .collect::<Vec<_>>(),
    )?;
    let input = EncoderInput::Features(v);
    backprop(&mut model, &input, &targets, &loss, false)?;
    let ids = model.decoder.all();
    reports.extend(reference_check(&model, &ids, &input, &targets, &loss, false, eps)?);

    if include_encoder {
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                backend: EncoderBackend::TinyConv,
                feature_dim: dec.feature_dim,
                num_frames: 2,
                channels: [2, 3],
                trainable: true,
                ..EncoderConfig::default()
            },
            decoder: dec,
            max_len: 8,
        };
        let mut model = Model::<f64>::new(cfg, &mut rng)?;
        let frames: Vec<crate::encoder::Frame> = (0..2)
            .map(|_| {
                let data = (0..9 * 9 * 3).map(|_| rand::Rng::gen_range(&mut rng, -1.0f32..1.0)).collect();
                crate::encoder::Frame::new(9, 9, data)
            })
            .collect::<Result<_>>()?;
        let input = EncoderInput::Pixels(crate::encoder::frames_to_input(&frames)?);
        backprop(&mut model, &input, &targets, &loss, true)?;
        let ids = model.store.ids_in(crate::params::Group::Encoder);
        reports.extend(reference_check(&model, &ids, &input, &targets, &loss, true, eps)?);
    }
    Ok(reports)
}

fn reference_check(
    model: &Model<f64>,
    ids: &[crate::params::ParamId],
    input: &EncoderInput<f64>,
    targets: &[usize],
    loss: &LossConfig,
    train_encoder: bool,
    eps: f64,
) -> Result<Vec<(String, GradCheckReport)>> {
    let mut probe: Model<Dd> = model.cast();
    let input = input.cast::<Dd>();
    check_params_reference(&model.store, ids, eps, |s| {
        // the closure gets a perturbed store; swap it in without reallocating
        probe.store.clone_from(s);
        loss_value(&probe, &input, targets, loss, train_encoder)
    })
}

fn backprop<T: Scalar>(model: &mut Model<T>, input: &EncoderInput<T>, targets: &[usize], loss: &LossConfig, train_encoder: bool) -> Result<()> {
    model.store.zero_grads();
    let mut g = Graph::new();
    let l = model.caption_loss(&mut g, "gradcheck", input, targets, loss, train_encoder, true)?;
    g.backward(l.total)?;
    model.store.accumulate_from(&g);
    Ok(())
}
