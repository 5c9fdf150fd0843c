//! Frame encoders mapping a clip to one feature vector per frame.
//!
//! Two backends:
//! * `feature_file`: precomputed features read from ETEF files; always frozen.
//! * `tiny_conv`: a small trainable conv stack applied to each frame,
//!   `conv3×3/2 → [bn] → tanh → conv3×3/2 → [bn] → tanh → mean-pool →
//!   linear → tanh`. Two normalized coordinate planes are appended to the
//!   RGB input so pooled features keep the object's position.
//!
//! ETEF layout (little-endian): magic `b"ETEF"`, `u32` version = 1, `u32` n,
//! `u32` D_v, then `n·D_v` `f32` values row-major.

use std::io::Write as _;
use std::path::Path;

use image::imageops::FilterType;
use image::{ImageBuffer, Rgb};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Group, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"ETEF";
pub const FEATURE_VERSION: u32 = 1;
/// RGB plus x and y coordinate planes.
pub const INPUT_CHANNELS: usize = 5;
pub const KERNEL: usize = 3;
pub const STRIDE: usize = 2;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderBackend {
    FeatureFile,
    TinyConv,
}

/// Resize-shorter-side, center-crop, then `(x − mean) / std` per channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub resize: usize,
    pub crop: usize,
    pub mean: f64,
    pub std: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            resize: 32,
            crop: 32,
            mean: 0.5,
            std: 0.5,
        }
    }
}

impl PreprocessConfig {
    /// Inception-ResNet-v2 style pipeline: 314 → center 299.
    pub fn inception() -> Self {
        PreprocessConfig {
            resize: 314,
            crop: 299,
            mean: 0.5,
            std: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub backend: EncoderBackend,
    /// D_v
    pub feature_dim: usize,
    /// n, frames per clip
    pub num_frames: usize,
    pub trainable: bool,
    pub batchnorm: bool,
    pub batchnorm_frozen: bool,
    /// Output channels of the two conv layers.
    pub channels: [usize; 2],
    /// Standardize the conv stack on the training frames before the first
    /// stage (tiny_conv only, see [`TinyConvParams::calibrate`]).
    pub calibrate: bool,
    pub preprocess: PreprocessConfig,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            backend: EncoderBackend::TinyConv,
            feature_dim: 64,
            num_frames: 16,
            trainable: true,
            batchnorm: false,
            batchnorm_frozen: true,
            channels: [16, 32],
            calibrate: true,
            preprocess: PreprocessConfig::default(),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::config("encoder.feature_dim", "must be positive"));
        }
        if self.num_frames == 0 {
            return Err(Error::config("encoder.num_frames", "must be positive"));
        }
        if self.backend == EncoderBackend::FeatureFile && self.trainable {
            return Err(Error::config(
                "encoder.trainable",
                "the feature_file backend cannot be trainable",
            ));
        }
        if self.batchnorm && !self.batchnorm_frozen {
            return Err(Error::config(
                "encoder.batchnorm_frozen",
                "batch normalization is only supported frozen",
            ));
        }
        if self.backend == EncoderBackend::TinyConv {
            if self.channels.contains(&0) {
                return Err(Error::config("encoder.channels", "must be positive"));
            }
            let p = &self.preprocess;
            if p.crop < min_frame_size() {
                return Err(Error::config(
                    "encoder.preprocess.crop",
                    format!("must be at least {}", min_frame_size()),
                ));
            }
            if p.resize < p.crop {
                return Err(Error::config("encoder.preprocess.resize", "must be ≥ crop"));
            }
            if !(p.std > 0.0) {
                return Err(Error::config("encoder.preprocess.std", "must be positive"));
            }
        }
        Ok(())
    }
}

/// Smallest frame side the conv stack accepts.
pub fn min_frame_size() -> usize {
    // two valid 3×3 stride-2 convs need 8 pixels to leave a 1×1 map
    8
}

/// An RGB frame, `height × width × 3` interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Frame {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::dim("frame", &[height, width, 3], &[data.len()]));
        }
        Ok(Frame { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Frame { height, width, data }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
        Frame {
            height: h as usize,
            width: w as usize,
            data,
        }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let raw = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("frame buffer size")
    }
}

/// A clip: `n` frames sharing one size.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub id: String,
    pub frames: Vec<Frame>,
}

/// `(row, col)` offset of a centered `crop × crop` window.
pub fn center_crop_offset(height: usize, width: usize, crop: usize) -> (usize, usize) {
    ((height - crop) / 2, (width - crop) / 2)
}

/// Resize the shorter side to `cfg.resize`, center-crop `cfg.crop`, and
/// normalize every channel with `cfg.mean` / `cfg.std`.
pub fn preprocess_frame(raw: &Frame, cfg: &PreprocessConfig) -> Result<Frame> {
    if raw.height == 0 || raw.width == 0 || raw.data.len() != raw.height * raw.width * 3 {
        return Err(Error::dim("preprocess_frame", &[raw.height, raw.width, 3], &[raw.data.len()]));
    }
    if cfg.resize < cfg.crop {
        return Err(Error::config("preprocess.resize", "must be ≥ crop"));
    }
    let short = raw.height.min(raw.width);
    let resized = if short == cfg.resize {
        raw.clone()
    } else {
        let scale = cfg.resize as f64 / short as f64;
        let nh = ((raw.height as f64 * scale).round() as usize).max(cfg.resize);
        let nw = ((raw.width as f64 * scale).round() as usize).max(cfg.resize);
        let buf: ImageBuffer<Rgb<f32>, Vec<f32>> =
            ImageBuffer::from_raw(raw.width as u32, raw.height as u32, raw.data.clone())
                .expect("frame buffer size");
        let out = image::imageops::resize(&buf, nw as u32, nh as u32, FilterType::Triangle);
        Frame {
            height: nh,
            width: nw,
            data: out.into_raw(),
        }
    };
    let (oy, ox) = center_crop_offset(resized.height, resized.width, cfg.crop);
    let (mean, std) = (cfg.mean as f32, cfg.std as f32);
    let mut data = Vec::with_capacity(cfg.crop * cfg.crop * 3);
    for y in oy..oy + cfg.crop {
        let start = ((y * resized.width) + ox) * 3;
        data.extend(resized.data[start..start + cfg.crop * 3].iter().map(|&v| (v - mean) / std));
    }
    Frame::new(cfg.crop, cfg.crop, data)
}

/// Stack preprocessed frames into the `[n × 5 × H × W]` conv input,
/// appending x and y coordinate planes in `[−1, 1]`.
pub fn frames_to_input<T: Scalar>(frames: &[Frame]) -> Result<Tensor<T>> {
    let first = frames
        .first()
        .ok_or_else(|| Error::contract("clip without frames"))?;
    let (h, w) = (first.height, first.width);
    let coord = |i: usize, len: usize| {
        if len <= 1 {
            0.0
        } else {
            -1.0 + 2.0 * i as f64 / (len - 1) as f64
        }
    };
    let mut data = Vec::with_capacity(frames.len() * INPUT_CHANNELS * h * w);
    for f in frames {
        if f.height != h || f.width != w {
            return Err(Error::dim("clip frames", &[h, w], &[f.height, f.width]));
        }
        for c in 0..3 {
            data.extend(f.data.iter().skip(c).step_by(3).map(|&v| T::of(v as f64)));
        }
        for y in 0..h {
            data.extend((0..w).map(|x| T::of(coord(x, w))));
            let _ = y;
        }
        for y in 0..h {
            data.extend(std::iter::repeat_n(T::of(coord(y, h)), w));
        }
    }
    Tensor::new(vec![frames.len(), INPUT_CHANNELS, h, w], data)
}

/// Batch-norm buffers for one conv layer, all frozen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchNormIds {
    pub mean: ParamId,
    pub var: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TinyConvParams {
    /// `[C1 × 5 × 3 × 3]`
    pub conv1_w: ParamId,
    pub conv1_b: ParamId,
    /// `[C2 × C1 × 3 × 3]`
    pub conv2_w: ParamId,
    pub conv2_b: ParamId,
    /// `[C2 × D_v]`
    pub proj_w: ParamId,
    /// `[1 × D_v]`
    pub proj_b: ParamId,
    pub bn: Option<[BatchNormIds; 2]>,
}

impl TinyConvParams {
    pub fn init<T: Scalar>(cfg: &EncoderConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Self {
        let [c1, c2] = cfg.channels;
        let g = Group::Encoder;
        let k2 = KERNEL * KERNEL;
        let conv1_w = store.add_matrix("encoder.conv1.w", g, &[c1, INPUT_CHANNELS, KERNEL, KERNEL], INPUT_CHANNELS * k2, rng);
        let conv1_b = store.add_zeros("encoder.conv1.b", g, &[c1]);
        let conv2_w = store.add_matrix("encoder.conv2.w", g, &[c2, c1, KERNEL, KERNEL], c1 * k2, rng);
        let conv2_b = store.add_zeros("encoder.conv2.b", g, &[c2]);
        let proj_w = store.add_matrix("encoder.proj.w", g, &[c2, cfg.feature_dim], c2, rng);
        let proj_b = store.add_zeros("encoder.proj.b", g, &[1, cfg.feature_dim]);
        let bn = cfg.batchnorm.then(|| {
            [(1, c1), (2, c2)].map(|(layer, c)| {
                let mut buf = |what: &str, v: f64| {
                    store.add_buffer(format!("encoder.bn{layer}.{what}"), g, Tensor::full(&[c], T::of(v)))
                };
                BatchNormIds {
                    mean: buf("mean", 0.0),
                    var: buf("var", 1.0),
                    gamma: buf("gamma", 1.0),
                    beta: buf("beta", 0.0),
                }
            })
        });
        TinyConvParams {
            conv1_w,
            conv1_b,
            conv2_w,
            conv2_b,
            proj_w,
            proj_b,
            bn,
        }
    }

    pub fn find<T: Scalar>(store: &ParamStore<T>, batchnorm: bool) -> Result<Self> {
        let get = |name: &str| {
            store
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
        };
        let bn = if batchnorm {
            let layer = |l: usize| -> Result<BatchNormIds> {
                Ok(BatchNormIds {
                    mean: get(&format!("encoder.bn{l}.mean"))?,
                    var: get(&format!("encoder.bn{l}.var"))?,
                    gamma: get(&format!("encoder.bn{l}.gamma"))?,
                    beta: get(&format!("encoder.bn{l}.beta"))?,
                })
            };
            Some([layer(1)?, layer(2)?])
        } else {
            None
        };
        Ok(TinyConvParams {
            conv1_w: get("encoder.conv1.w")?,
            conv1_b: get("encoder.conv1.b")?,
            conv2_w: get("encoder.conv2.w")?,
            conv2_b: get("encoder.conv2.b")?,
            proj_w: get("encoder.proj.w")?,
            proj_b: get("encoder.proj.b")?,
            bn,
        })
    }

    /// First-layer weights, where end-to-end gradient flow is checked.
    pub fn first_layer(&self) -> ParamId {
        self.conv1_w
    }

    fn bn_affine<T: Scalar>(store: &ParamStore<T>, ids: &BatchNormIds) -> (Vec<f64>, Vec<f64>) {
        let vals = |id| store.value(id).to_f64_vec();
        let (mean, var, gamma, beta) = (vals(ids.mean), vals(ids.var), vals(ids.gamma), vals(ids.beta));
        let scale: Vec<f64> = gamma
            .iter()
            .zip(&var)
            .map(|(g, v)| g / (v + BN_EPS).sqrt())
            .collect();
        let shift = beta
            .iter()
            .zip(&mean)
            .zip(&scale)
            .map(|((b, m), s)| b - m * s)
            .collect();
        (scale, shift)
    }

    /// Record the conv stack on `graph` for an `[n × 5 × H × W]` input.
    /// Returns `V` with shape `[n × D_v]`.
    pub fn forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        g: &mut Graph<T>,
        input: Var,
        requires_grad: bool,
    ) -> Result<Var> {
        let [_, _, v] = self.pre_activations(store, g, input, requires_grad)?;
        Ok(g.tanh(v))
    }

    /// Data-dependent init (layer-sequential unit variance): rescale each
    /// output channel of conv1, conv2 and the projection, in that order, so
    /// its pre-activation has zero mean and unit variance over every frame
    /// and position of `inputs`. Conv layers are left alone when batchnorm
    /// is enabled, since its frozen statistics already fix their scale.
    ///
    /// Global pooling of a random conv stack leaves a small object as a tiny
    /// perturbation of the background response; without this the features
    /// barely differ between clips.
    pub fn calibrate<T: Scalar>(&self, store: &mut ParamStore<T>, inputs: &[&Tensor<T>]) -> Result<()> {
        let layers = [
            (self.conv1_w, self.conv1_b),
            (self.conv2_w, self.conv2_b),
            (self.proj_w, self.proj_b),
        ];
        let first = if self.bn.is_some() { 2 } else { 0 };
        for (k, &(w, b)) in layers.iter().enumerate().skip(first) {
            let c = store.value(b).numel();
            let (mut n, mut sum, mut sq) = (0usize, vec![0.0f64; c], vec![0.0f64; c]);
            for x in inputs {
                let mut g = Graph::new();
                let x = g.constant((*x).clone());
                let z = self.pre_activations(store, &mut g, x, false)?[k];
                let z = g.value(z);
                // [n × C] or [n × C × H × W]
                let inner: usize = z.shape()[2..].iter().product();
                for (i, v) in z.data().iter().enumerate() {
                    let ch = (i / inner) % c;
                    let v = v.as_f64();
                    sum[ch] += v;
                    sq[ch] += v * v;
                }
                n += z.numel() / c;
            }
            if n < 2 {
                return Ok(());
            }
            let wshape = store.value(w).shape().to_vec();
            for ch in 0..c {
                let mean = sum[ch] / n as f64;
                let sd = (sq[ch] / n as f64 - mean * mean).max(0.0).sqrt();
                if sd < 1e-12 {
                    continue;
                }
                let wv = store.value_mut(w);
                if k < 2 {
                    // conv weights are [c_out × c_in × k × k]
                    let per: usize = wshape[1..].iter().product();
                    for x in &mut wv.data_mut()[ch * per..(ch + 1) * per] {
                        *x = T::of(x.as_f64() / sd);
                    }
                } else {
                    // projection is [c_in × D_v]
                    for r in 0..wshape[0] {
                        let x = &mut wv.data_mut()[r * c + ch];
                        *x = T::of(x.as_f64() / sd);
                    }
                }
                let x = &mut store.value_mut(b).data_mut()[ch];
                *x = T::of((x.as_f64() - mean) / sd);
            }
        }
        Ok(())
    }

    /// Pre-activations of conv1, conv2 and the projection.
    fn pre_activations<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        g: &mut Graph<T>,
        input: Var,
        requires_grad: bool,
    ) -> Result<[Var; 3]> {
        let s = g.shape(input);
        if s.len() != 4 || s[1] != INPUT_CHANNELS {
            return Err(Error::dim("tiny_conv input", s, &[0, INPUT_CHANNELS, 0, 0]));
        }
        if s[2] < min_frame_size() || s[3] < min_frame_size() {
            return Err(Error::dim("tiny_conv receptive field", s, &[min_frame_size(), min_frame_size()]));
        }
        let bind = |g: &mut Graph<T>, id| store.bind(g, id, requires_grad);
        let (w1, b1) = (bind(g, self.conv1_w), bind(g, self.conv1_b));
        let (w2, b2) = (bind(g, self.conv2_w), bind(g, self.conv2_b));
        let (pw, pb) = (bind(g, self.proj_w), bind(g, self.proj_b));

        let mut z1 = g.conv2d(input, w1, b1, STRIDE)?;
        if let Some(bn) = &self.bn {
            let (scale, shift) = Self::bn_affine(store, &bn[0]);
            z1 = g.channel_affine(z1, &scale, &shift)?;
        }
        let h = g.tanh(z1);
        let mut z2 = g.conv2d(h, w2, b2, STRIDE)?;
        if let Some(bn) = &self.bn {
            let (scale, shift) = Self::bn_affine(store, &bn[1]);
            z2 = g.channel_affine(z2, &scale, &shift)?;
        }
        let h = g.tanh(z2);
        let pooled = g.spatial_mean(h)?;
        let v = g.matmul(pooled, pw)?;
        let z3 = g.add(v, pb)?;
        Ok([z1, z2, z3])
    }

    /// Feature vector of one preprocessed frame, `[1 × D_v]`.
    pub fn tiny_conv_forward<T: Scalar>(&self, store: &ParamStore<T>, frame: &Frame) -> Result<Tensor<T>> {
        if frame.height < min_frame_size() || frame.width < min_frame_size() {
            return Err(Error::dim(
                "tiny_conv receptive field",
                &[frame.height, frame.width],
                &[min_frame_size(), min_frame_size()],
            ));
        }
        let mut g = Graph::new();
        let x = g.constant(frames_to_input(std::slice::from_ref(frame))?);
        let v = self.forward(store, &mut g, x, false)?;
        Ok(g.value(v).clone())
    }
}

/// What the encoder consumes for one clip.
#[derive(Clone, Debug, PartialEq)]
pub enum EncoderInput<T> {
    /// `[n × D_v]` precomputed features.
    Features(Tensor<T>),
    /// `[n × 5 × H × W]` preprocessed frames (see [`frames_to_input`]).
    Pixels(Tensor<T>),
}

impl<T: Scalar> EncoderInput<T> {
    pub fn num_frames(&self) -> usize {
        match self {
            EncoderInput::Features(t) | EncoderInput::Pixels(t) => t.shape()[0],
        }
    }

    pub fn cast<U: Scalar>(&self) -> EncoderInput<U> {
        match self {
            EncoderInput::Features(t) => EncoderInput::Features(t.cast()),
            EncoderInput::Pixels(t) => EncoderInput::Pixels(t.cast()),
        }
    }
}

/// Map one clip to `V` on `graph`.
///
/// Frozen encoders (`cfg.trainable == false`, or `requires_grad == false`)
/// produce a constant leaf; trainable ones record the conv stack so the
/// captioning gradient reaches the first conv layer.
pub fn encode<T: Scalar>(
    id: &str,
    input: &EncoderInput<T>,
    cfg: &EncoderConfig,
    params: Option<&TinyConvParams>,
    store: &ParamStore<T>,
    g: &mut Graph<T>,
    requires_grad: bool,
) -> Result<Var> {
    if input.num_frames() != cfg.num_frames {
        return Err(Error::ingestion(
            id,
            format!("expected {} frames, got {}", cfg.num_frames, input.num_frames()),
        ));
    }
    match input {
        EncoderInput::Features(t) => {
            if t.shape().len() != 2 || t.shape()[1] != cfg.feature_dim {
                return Err(Error::ingestion(
                    id,
                    format!("expected feature dim {}, got shape {:?}", cfg.feature_dim, t.shape()),
                ));
            }
            Ok(g.constant(t.clone()))
        }
        EncoderInput::Pixels(t) => {
            let params = params.ok_or_else(|| Error::ingestion(id, "frames given but the encoder has no conv stack"))?;
            let track = requires_grad && cfg.trainable;
            if track {
                let x = g.constant(t.clone());
                params.forward(store, g, x, true)
            } else {
                let v = encode_frozen(input, params, store)?;
                Ok(g.constant(v))
            }
        }
    }
}

/// Evaluate the encoder without recording a graph.
pub fn encode_frozen<T: Scalar>(
    input: &EncoderInput<T>,
    params: &TinyConvParams,
    store: &ParamStore<T>,
) -> Result<Tensor<T>> {
    match input {
        EncoderInput::Features(t) => Ok(t.clone()),
        EncoderInput::Pixels(t) => {
            let mut g = Graph::new();
            let x = g.constant(t.clone());
            let v = params.forward(store, &mut g, x, false)?;
            Ok(g.value(v).clone())
        }
    }
}

/// Write an ETEF feature file.
pub fn write_features(path: &Path, features: &Tensor<f32>) -> Result<()> {
    let s = features.shape();
    if s.len() != 2 {
        return Err(Error::dim("write_features", s, &[0, 0]));
    }
    let mut buf = Vec::with_capacity(16 + features.numel() * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(s[0] as u32).to_le_bytes());
    buf.extend_from_slice(&(s[1] as u32).to_le_bytes());
    for v in features.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Read an ETEF feature file as `[n × D_v]`.
pub fn read_features(path: &Path, id: &str) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::ingestion(id, format!("{}: {e}", path.display())))?;
    parse_features(&bytes).map_err(|reason| Error::ingestion(id, reason))
}

pub fn parse_features(bytes: &[u8]) -> std::result::Result<Tensor<f32>, String> {
    if bytes.len() < 16 || &bytes[..4] != FEATURE_MAGIC {
        return Err("not an ETEF feature file".into());
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != FEATURE_VERSION {
        return Err(format!("unsupported ETEF version {version}"));
    }
    let (n, d) = (word(8) as usize, word(12) as usize);
    let expected = 16 + n * d * 4;
    if bytes.len() != expected {
        return Err(format!("ETEF body holds {} bytes, header implies {expected}", bytes.len()));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(vec![n, d], data).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn crop_offset_examples() {
        assert_eq!(center_crop_offset(314, 314, 299), (7, 7));
        assert_eq!(center_crop_offset(32, 40, 32), (0, 4));
    }

    #[test]
    fn normalization_examples() {
        let cfg = PreprocessConfig {
            resize: 8,
            crop: 8,
            ..PreprocessConfig::default()
        };
        let half = preprocess_frame(&Frame::filled(8, 8, [0.5; 3]), &cfg).unwrap();
        assert!(half.data.iter().all(|&v| v == 0.0));
        let one = preprocess_frame(&Frame::filled(8, 8, [1.0; 3]), &cfg).unwrap();
        assert!(one.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn inception_pipeline_shape() {
        let raw = Frame::filled(320, 400, [0.25, 0.5, 0.75]);
        let out = preprocess_frame(&raw, &PreprocessConfig::inception()).unwrap();
        assert_eq!((out.height, out.width), (299, 299));
        let p = out.pixel(150, 150);
        assert!((p[0] + 0.5).abs() < 1e-5 && p[1].abs() < 1e-5 && (p[2] - 0.5).abs() < 1e-5);
    }

    #[test]
    fn zero_params_give_zero_features() {
        let cfg = EncoderConfig::default();
        let mut store = ParamStore::<f64>::new();
        let p = TinyConvParams::init(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0));
        for (id, _) in store.clone().iter() {
            let shape = store.value(id).shape().to_vec();
            store.set_value(id, Tensor::zeros(&shape)).unwrap();
        }
        let v = p.tiny_conv_forward(&store, &Frame::filled(16, 16, [0.3, 0.1, 0.9])).unwrap();
        assert_eq!(v.shape(), &[1, 64]);
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn too_small_frame_is_rejected() {
        let cfg = EncoderConfig::default();
        let mut store = ParamStore::<f64>::new();
        let p = TinyConvParams::init(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(
            p.tiny_conv_forward(&store, &Frame::filled(7, 9, [0.0; 3])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn etef_roundtrip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.etef");
        let t = Tensor::new(vec![3, 2], vec![1.0f32, -2.0, 3.5, 0.0, 1e-3, 7.0]).unwrap();
        write_features(&path, &t).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"ETEF");
        assert_eq!(bytes.len(), 16 + 6 * 4);
        assert_eq!(read_features(&path, "c").unwrap(), t);
        assert!(parse_features(&bytes[..20]).is_err());
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(parse_features(&bad).is_err());
    }

    #[test]
    fn feature_backend_cannot_train() {
        let cfg = EncoderConfig {
            backend: EncoderBackend::FeatureFile,
            trainable: true,
            ..EncoderConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
    }
}
