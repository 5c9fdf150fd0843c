//! Manifest ingestion and the synthetic shape-motion dataset.
//!
//! A manifest is JSONL, one clip per line:
//!
//! ```json
//! {"id": "c0", "frame_dir": "frames/c0", "captions": ["a red square moves left"], "split": "train"}
//! {"id": "c1", "feature_path": "feats/c1.etef", "captions": ["..."], "split": "val"}
//! ```
//!
//! Relative paths are resolved against the manifest's directory. Frame
//! directories hold PNG files whose names sort in temporal order.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, BufReader, Write as _};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{self, EncoderBackend, EncoderConfig, EncoderInput, Frame};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::text::{tokenize, Vocabulary};
use crate::train::Sample;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_dir: Option<PathBuf>,
    pub captions: Vec<String>,
    pub split: Split,
}

/// Loaded clip data, before conversion to the training precision.
#[derive(Clone, Debug, PartialEq)]
pub enum ClipData {
    /// `[n × D_v]` precomputed features.
    Features(Tensor<f32>),
    /// `n` preprocessed frames.
    Frames(Vec<Frame>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionedClip {
    pub id: String,
    pub split: Split,
    pub captions: Vec<String>,
    /// `captions` after tokenization.
    pub tokens: Vec<Vec<String>>,
    pub data: ClipData,
}

impl CaptionedClip {
    pub fn encoder_input<T: Scalar>(&self) -> Result<EncoderInput<T>> {
        Ok(match &self.data {
            ClipData::Features(t) => EncoderInput::Features(t.cast()),
            ClipData::Frames(f) => EncoderInput::Pixels(encoder::frames_to_input(f)?),
        })
    }
}

/// Indices of `n` equally spaced frames out of `total`:
/// `round(i·(total−1)/(n−1))`, or the middle frame when `n = 1`.
pub fn sample_frames(total: usize, n: usize) -> Result<Vec<usize>> {
    if total == 0 {
        return Err(Error::ingestion("<clip>", "clip has no frames"));
    }
    if n == 0 {
        return Err(Error::contract("cannot sample zero frames"));
    }
    if n == 1 {
        return Ok(vec![(total - 1) / 2]);
    }
    let span = (total - 1) as f64;
    Ok((0..n)
        .map(|i| (i as f64 * span / (n - 1) as f64).round() as usize)
        .collect())
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// PNG files of a frame directory in name order.
pub fn list_frames(dir: &Path) -> std::result::Result<Vec<PathBuf>, String> {
    let rd = std::fs::read_dir(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    let mut files: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

fn load_entry(base: &Path, e: &ManifestEntry, cfg: &EncoderConfig) -> std::result::Result<CaptionedClip, String> {
    if e.captions.is_empty() {
        return Err("no captions".into());
    }
    let data = match (&e.feature_path, &e.frame_dir) {
        (Some(fp), None) => {
            let t = encoder::read_features(&resolve(base, fp), &e.id).map_err(|err| err.to_string())?;
            if t.shape() != [cfg.num_frames, cfg.feature_dim] {
                return Err(format!(
                    "feature record is {:?}, expected [{}, {}]",
                    t.shape(),
                    cfg.num_frames,
                    cfg.feature_dim
                ));
            }
            ClipData::Features(t)
        }
        (None, Some(dir)) => {
            if cfg.backend != EncoderBackend::TinyConv {
                return Err("frame_dir given but the encoder reads feature files".into());
            }
            let files = list_frames(&resolve(base, dir))?;
            let idx = sample_frames(files.len(), cfg.num_frames).map_err(|_| "frame directory is empty".to_string())?;
            let mut frames = Vec::with_capacity(idx.len());
            for i in idx {
                let img = image::open(&files[i]).map_err(|err| format!("{}: {err}", files[i].display()))?;
                let raw = Frame::from_rgb8(&img.to_rgb8());
                frames.push(encoder::preprocess_frame(&raw, &cfg.preprocess).map_err(|err| err.to_string())?);
            }
            ClipData::Frames(frames)
        }
        _ => return Err("exactly one of feature_path and frame_dir is required".into()),
    };
    Ok(CaptionedClip {
        id: e.id.clone(),
        split: e.split,
        captions: e.captions.clone(),
        tokens: e.captions.iter().map(|c| tokenize(c)).collect(),
        data,
    })
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line)
            .map_err(|e| Error::ingestion(format!("line {}", i + 1), e.to_string()))?;
        out.push(entry);
    }
    Ok(out)
}

/// Load and validate every clip, in manifest order. All failures are
/// reported together, each with its id.
pub fn load_manifest(path: &Path, cfg: &EncoderConfig) -> Result<Vec<CaptionedClip>> {
    let entries = read_manifest(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut clips = Vec::with_capacity(entries.len());
    let mut errors = Vec::new();
    let mut seen = BTreeSet::new();
    for e in &entries {
        if !seen.insert(e.id.clone()) {
            errors.push(format!("{}: duplicate id", e.id));
            continue;
        }
        match load_entry(base, e, cfg) {
            Ok(c) => clips.push(c),
            Err(reason) => errors.push(format!("{}: {reason}", e.id)),
        }
    }
    if errors.is_empty() {
        Ok(clips)
    } else {
        let ids = entries
            .iter()
            .filter(|e| errors.iter().any(|m| m.starts_with(&format!("{}:", e.id))))
            .map(|e| e.id.clone())
            .collect::<Vec<_>>()
            .join(", ");
        Err(Error::ingestion(ids, errors.join("; ")))
    }
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut body = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut body, e)?;
        body.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&body).map_err(|e| Error::io(path, e))
}

/// One training sample per (clip, caption) pair; clips share their input.
pub fn to_samples<T: Scalar>(clips: &[&CaptionedClip], vocab: &Vocabulary, max_len: usize) -> Result<Vec<Sample<T>>> {
    let mut out = Vec::new();
    for c in clips {
        let input = Arc::new(c.encoder_input::<T>()?);
        for toks in &c.tokens {
            out.push(Sample {
                id: c.id.clone(),
                input: input.clone(),
                targets: vocab.encode_tokens(toks, max_len),
            });
        }
    }
    Ok(out)
}

pub fn split_of(clips: &[CaptionedClip], split: Split) -> Vec<&CaptionedClip> {
    clips.iter().filter(|c| c.split == split).collect()
}

pub const COLORS: [&str; 3] = ["red", "green", "blue"];
pub const SHAPES: [&str; 3] = ["square", "circle", "triangle"];
pub const MOTIONS: [&str; 4] = ["left", "right", "up", "down"];

const RGB: [[u8; 3]; 3] = [[230, 40, 40], [40, 200, 60], [50, 80, 235]];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub image_size: usize,
    pub num_frames: usize,
    pub seed: u64,
    /// Distinct renderings of each latent combination.
    pub clips_per_combo: usize,
    /// Held-out combinations for validation and test.
    pub val_combos: usize,
    pub test_combos: usize,
    /// Largest start offset across the direction of motion, as a fraction
    /// of the image size. Spreads each shape over many positions so shape
    /// and position are not confounded with the motion label.
    pub lateral_jitter: f64,
    /// Object radius range as fractions of the image size.
    pub radius: [f64; 2],
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            image_size: 32,
            num_frames: 16,
            seed: 0,
            clips_per_combo: 12,
            val_combos: 4,
            test_combos: 4,
            lateral_jitter: 0.0,
            radius: [0.14, 0.17],
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::config("synth.image_size", "must be at least 16"));
        }
        if self.num_frames < 2 {
            return Err(Error::config("synth.num_frames", "must be at least 2"));
        }
        if self.clips_per_combo == 0 {
            return Err(Error::config("synth.clips_per_combo", "must be positive"));
        }
        let [lo, hi] = self.radius;
        if !(0.05 <= lo && lo <= hi && hi <= 0.2) {
            return Err(Error::config("synth.radius", "need 0.05 <= min <= max <= 0.2"));
        }
        if !(0.0..=0.25).contains(&self.lateral_jitter) {
            return Err(Error::config("synth.lateral_jitter", "must lie in [0, 0.25]"));
        }
        if self.val_combos + self.test_combos > held_out_combos().len() {
            return Err(Error::config(
                "synth",
                format!("at most {} combinations can be held out", held_out_combos().len()),
            ));
        }
        Ok(())
    }
}

/// Latent factors as indices into [`COLORS`], [`SHAPES`], [`MOTIONS`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Combo {
    pub color: usize,
    pub shape: usize,
    pub motion: usize,
}

impl Combo {
    pub fn caption(&self) -> String {
        format!(
            "a {} {} moves {}",
            COLORS[self.color], SHAPES[self.shape], MOTIONS[self.motion]
        )
    }

    pub fn all() -> Vec<Combo> {
        let mut v = Vec::with_capacity(36);
        for color in 0..3 {
            for shape in 0..3 {
                for motion in 0..4 {
                    v.push(Combo { color, shape, motion });
                }
            }
        }
        v
    }
}

/// Combinations that may be held out, in val-then-test order. Motion is
/// `(color + shape) mod 4`, so no two share a (color, shape),
/// (color, motion) or (shape, motion) pair and every pair of factors still
/// occurs in training.
pub fn held_out_combos() -> Vec<Combo> {
    let order = [(0, 0), (1, 2), (2, 1), (1, 1), (0, 1), (2, 0), (0, 2), (1, 0)];
    order
        .iter()
        .map(|&(color, shape)| Combo {
            color,
            shape,
            motion: (color + shape) % 4,
        })
        .collect()
}

pub fn combo_split(spec: &SynthSpec, combo: &Combo) -> Split {
    let held = held_out_combos();
    match held.iter().position(|c| c == combo) {
        Some(i) if i < spec.val_combos => Split::Val,
        Some(i) if i < spec.val_combos + spec.test_combos => Split::Test,
        _ => Split::Train,
    }
}

fn inside(shape: usize, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        0 => dx.abs() <= r && dy.abs() <= r,
        1 => dx * dx + dy * dy <= r * r,
        // upward-pointing isosceles triangle
        _ => dy <= r && dy >= -r && dx.abs() <= (dy + r) / 2.0,
    }
}

/// Render one frame with 4×4 supersampling.
fn render(size: usize, combo: &Combo, cx: f64, cy: f64, r: f64) -> image::RgbImage {
    const SS: usize = 4;
    let mut img = image::RgbImage::new(size as u32, size as u32);
    let fg = RGB[combo.color];
    for y in 0..size {
        for x in 0..size {
            let mut hits = 0;
            for sy in 0..SS {
                for sx in 0..SS {
                    let px = x as f64 + (sx as f64 + 0.5) / SS as f64;
                    let py = y as f64 + (sy as f64 + 0.5) / SS as f64;
                    if inside(combo.shape, px - cx, py - cy, r) {
                        hits += 1;
                    }
                }
            }
            let a = hits as f64 / (SS * SS) as f64;
            let px = fg.map(|c| (c as f64 * a).round() as u8);
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img
}

/// Object centres for one clip: start near the middle (offset sideways by
/// up to `lateral_jitter`) and travel toward the named side.
fn trajectory(spec: &SynthSpec, motion: usize, rng: &mut ChaCha8Rng) -> (f64, Vec<(f64, f64)>) {
    let s = spec.image_size as f64;
    let r = s * rng.gen_range(spec.radius[0]..=spec.radius[1]);
    let travel = s / 2.0 - r - 1.5;
    let jitter = s * 0.03;
    let (dx, dy): (f64, f64) = match motion {
        0 => (-1.0, 0.0),
        1 => (1.0, 0.0),
        2 => (0.0, -1.0),
        _ => (0.0, 1.0),
    };
    let along = rng.gen_range(-jitter..jitter);
    let lateral = s * spec.lateral_jitter;
    let across = if lateral > 0.0 { rng.gen_range(-lateral..lateral) } else { 0.0 };
    let start = (s / 2.0 + along * dx.abs() + across * dy.abs(), s / 2.0 + along * dy.abs() + across * dx.abs());
    let step = (travel - jitter) / (spec.num_frames - 1) as f64;
    let pts = (0..spec.num_frames)
        .map(|t| (start.0 + dx * step * t as f64, start.1 + dy * step * t as f64))
        .collect();
    (r, pts)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthClip {
    pub id: String,
    pub combo: Combo,
    pub split: Split,
    pub caption: String,
    pub frames: Vec<image::RgbImage>,
}

/// Deterministic clips for every combination, `clips_per_combo` each.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Vec<SynthClip>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::new();
    for combo in Combo::all() {
        for k in 0..spec.clips_per_combo {
            let (r, pts) = trajectory(spec, combo.motion, &mut rng);
            let frames = pts.iter().map(|&(x, y)| render(spec.image_size, &combo, x, y, r)).collect();
            out.push(SynthClip {
                id: format!(
                    "{}-{}-{}-{k}",
                    COLORS[combo.color], SHAPES[combo.shape], MOTIONS[combo.motion]
                ),
                combo,
                split: combo_split(spec, &combo),
                caption: combo.caption(),
                frames,
            });
        }
    }
    Ok(out)
}

/// Write frames under `dir/frames/<id>/NNN.png` and `dir/manifest.jsonl`.
pub fn write_synthetic(dir: &Path, clips: &[SynthClip]) -> Result<PathBuf> {
    let mut entries = Vec::with_capacity(clips.len());
    for c in clips {
        let rel = PathBuf::from("frames").join(&c.id);
        let fdir = dir.join(&rel);
        std::fs::create_dir_all(&fdir).map_err(|e| Error::io(&fdir, e))?;
        for (i, f) in c.frames.iter().enumerate() {
            let p = fdir.join(format!("{i:03}.png"));
            f.save_with_format(&p, image::ImageFormat::Png)?;
        }
        entries.push(ManifestEntry {
            id: c.id.clone(),
            feature_path: None,
            frame_dir: Some(rel),
            captions: vec![c.caption.clone()],
            split: c.split,
        });
    }
    let manifest = dir.join("manifest.jsonl");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

/// Intensity-weighted centroid `(x, y)` of a rendered frame.
pub fn centroid(img: &image::RgbImage) -> (f64, f64) {
    let (mut sx, mut sy, mut m) = (0.0, 0.0, 0.0);
    for (x, y, p) in img.enumerate_pixels() {
        let w: f64 = p.0.iter().map(|&c| c as f64).sum();
        sx += w * x as f64;
        sy += w * y as f64;
        m += w;
    }
    (sx / m, sy / m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_frames_examples() {
        assert_eq!(sample_frames(16, 16).unwrap(), (0..16).collect::<Vec<_>>());
        assert_eq!(sample_frames(31, 16).unwrap(), (0..16).map(|i| 2 * i).collect::<Vec<_>>());
        assert_eq!(sample_frames(4, 8).unwrap(), vec![0, 0, 1, 1, 2, 2, 3, 3]);
        assert_eq!(sample_frames(9, 1).unwrap(), vec![4]);
        assert!(matches!(sample_frames(0, 4), Err(Error::Ingestion { .. })));
    }

    #[test]
    fn held_out_pairs_all_seen_in_training() {
        let spec = SynthSpec::default();
        let train: Vec<Combo> = Combo::all()
            .into_iter()
            .filter(|c| combo_split(&spec, c) == Split::Train)
            .collect();
        assert_eq!(train.len(), 28);
        for h in held_out_combos() {
            assert!(train.iter().any(|t| t.color == h.color && t.shape == h.shape));
            assert!(train.iter().any(|t| t.color == h.color && t.motion == h.motion));
            assert!(train.iter().any(|t| t.shape == h.shape && t.motion == h.motion));
        }
    }

    #[test]
    fn motion_moves_the_centroid() {
        let spec = SynthSpec {
            clips_per_combo: 1,
            ..SynthSpec::default()
        };
        for clip in generate_synthetic(&spec).unwrap() {
            let cs: Vec<(f64, f64)> = clip.frames.iter().map(centroid).collect();
            for w in cs.windows(2) {
                let (a, b) = (w[0], w[1]);
                let ok = match clip.combo.motion {
                    0 => b.0 < a.0,
                    1 => b.0 > a.0,
                    2 => b.1 < a.1,
                    _ => b.1 > a.1,
                };
                assert!(ok, "{} {:?} -> {:?}", clip.id, a, b);
            }
        }
    }
}
