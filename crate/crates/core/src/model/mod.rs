//! Three-stage segmentation pipeline: a per-frame hierarchical encoder, one
//! video attention block per scale, and a pointwise decoder that fuses the
//! scales into a full-resolution logit map.

mod checkpoint;
mod optim;
mod train;

use std::collections::BTreeMap;
use std::fmt;
use std::io;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::attention::{
    self, xavier, AttentionConfig, AttentionParams, AttentionVariant, Geometry, Implementation,
    ScaleMode, VideoTokens,
};
use crate::autodiff::{Tape, Var};
use crate::contrastive::{ContrastConfig, ContrastVariant};
use crate::losses::LossWeights;
use crate::tensor::{Tensor, TensorError};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CKPT_MAGIC,
    CKPT_VERSION,
};
pub use optim::AdamW;
pub use train::{
    clip_losses, clip_losses_with_orders, fit, hinge_orders, train_step, BatchLoss, EpochLog,
    LossComponents, TrainConfig,
};

/// Downsampling ratio of each encoder stage.
pub const STRIDES: [usize; 4] = [4, 8, 16, 32];

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite {component} loss at step {step}")]
    NonFinite { step: u64, component: &'static str },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub h: usize,
    pub w: usize,
    pub t: usize,
    /// Channels of the four encoder stages.
    pub channels: [usize; 4],
    pub heads: usize,
    /// Common width every scale is projected to in the decoder.
    pub decoder_width: usize,
    pub attention: AttentionVariant,
    pub contrast: ContrastVariant,
    pub scale: ScaleMode,
    /// Query chunk of the streaming attention kernel.
    pub chunk: usize,
    pub tau: f64,
    pub contrast_normalize: bool,
    /// Encoder stage whose features are pooled for the contrastive term.
    pub contrast_stage: usize,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            h: 64,
            w: 64,
            t: 4,
            channels: [16, 32, 64, 128],
            heads: 1,
            decoder_width: 32,
            attention: AttentionVariant::None,
            contrast: ContrastVariant::None,
            scale: ScaleMode::SqrtHeadDim,
            chunk: 64,
            tau: ContrastConfig::default().tau,
            contrast_normalize: true,
            contrast_stage: 1,
            weights: LossWeights::default(),
            seed: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| ModelError::Config(format!("{key}={value}: {e}")))
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        let d = STRIDES[3];
        if self.h == 0 || self.w == 0 || !self.h.is_multiple_of(d) || !self.w.is_multiple_of(d) {
            return bad(format!("{}x{} is not divisible by {d}", self.h, self.w));
        }
        if self.t == 0 {
            return bad("t must be positive".into());
        }
        if self.heads == 0 {
            return bad("heads must be positive".into());
        }
        if let Some(c) = self
            .channels
            .iter()
            .find(|&&c| c == 0 || c % self.heads != 0)
        {
            return bad(format!("{} heads do not divide {c} channels", self.heads));
        }
        if self.decoder_width == 0 || self.chunk == 0 {
            return bad("decoder_width and chunk must be positive".into());
        }
        if self.contrast_stage >= STRIDES.len() {
            return bad(format!(
                "contrast_stage {} out of range",
                self.contrast_stage
            ));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        Ok(())
    }

    /// Token grid of stage `i`.
    pub fn geometry(&self, i: usize) -> Geometry {
        Geometry::new(self.t, self.h / STRIDES[i], self.w / STRIDES[i])
    }

    pub fn attention_config(&self) -> AttentionConfig {
        AttentionConfig {
            scale: self.scale,
            implementation: Implementation::Streaming { chunk: self.chunk },
            ..Default::default()
        }
    }

    pub fn contrast_config(&self) -> ContrastConfig {
        ContrastConfig {
            tau: self.tau,
            normalize: self.contrast_normalize,
        }
    }

    /// Applies one `key=value` setting. Returns `Ok(false)` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "h" => self.h = parse(key, value)?,
            "w" => self.w = parse(key, value)?,
            "t" => self.t = parse(key, value)?,
            "channels" => {
                let v: Vec<usize> = value
                    .split(',')
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<_>>()?;
                self.channels = v.try_into().map_err(|_| {
                    ModelError::Config(format!("channels={value}: need four values"))
                })?;
            }
            "heads" => self.heads = parse(key, value)?,
            "decoder_width" => self.decoder_width = parse(key, value)?,
            "attention" => self.attention = parse(key, value)?,
            "contrast" => self.contrast = parse(key, value)?,
            "scale" => self.scale = parse(key, value)?,
            "chunk" => self.chunk = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "contrast_normalize" => self.contrast_normalize = parse(key, value)?,
            "contrast_stage" => self.contrast_stage = parse(key, value)?,
            "hinge_weight" => self.weights.hinge = parse(key, value)?,
            "contrast_weight" => self.weights.contrast = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Parses the output of `Display`; later lines win, `#` starts a comment.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ModelError::Config(format!(
                    "line {}: expected key=value",
                    i + 1
                )));
            };
            if !cfg.set(k.trim(), v.trim())? {
                return Err(ModelError::Config(format!(
                    "line {}: unknown key {:?}",
                    i + 1,
                    k.trim()
                )));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for PipelineConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = self.channels;
        writeln!(f, "h={}", self.h)?;
        writeln!(f, "w={}", self.w)?;
        writeln!(f, "t={}", self.t)?;
        writeln!(f, "channels={},{},{},{}", c[0], c[1], c[2], c[3])?;
        writeln!(f, "heads={}", self.heads)?;
        writeln!(f, "decoder_width={}", self.decoder_width)?;
        writeln!(f, "attention={}", self.attention)?;
        writeln!(f, "contrast={}", self.contrast)?;
        writeln!(f, "scale={}", self.scale)?;
        writeln!(f, "chunk={}", self.chunk)?;
        writeln!(f, "tau={}", self.tau)?;
        writeln!(f, "contrast_normalize={}", self.contrast_normalize)?;
        writeln!(f, "contrast_stage={}", self.contrast_stage)?;
        writeln!(f, "hinge_weight={}", self.weights.hinge)?;
        writeln!(f, "contrast_weight={}", self.weights.contrast)?;
        writeln!(f, "seed={}", self.seed)
    }
}

/// `(kernel, padding)` of the overlapping patch embedding of stage `i`.
fn patch_shape(i: usize) -> (usize, usize) {
    if i == 0 {
        (7, 3)
    } else {
        (3, 1)
    }
}

fn stage_input_channels(cfg: &PipelineConfig, i: usize) -> usize {
    if i == 0 {
        1
    } else {
        cfg.channels[i - 1]
    }
}

/// Named parameter tensors of a pipeline.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore {
    pub tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    /// Xavier weights, zero biases, zero attention output projections.
    pub fn init(cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut p = BTreeMap::new();
        for i in 0..4 {
            let (k, _) = patch_shape(i);
            let (cin, c) = (stage_input_channels(cfg, i), cfg.channels[i]);
            p.insert(format!("enc.{i}.patch.w"), xavier(k * k * cin, c, &mut rng));
            p.insert(format!("enc.{i}.patch.b"), Tensor::zeros([c]));
            p.insert(format!("enc.{i}.mix.w"), xavier(c, c, &mut rng));
            p.insert(format!("enc.{i}.mix.b"), Tensor::zeros([c]));
        }
        for i in 0..4 {
            let full = AttentionParams::init(cfg.channels[i], cfg.heads, &mut rng);
            for (name, t) in full.named() {
                if cfg.attention.param_names().contains(&name) {
                    p.insert(format!("attn.{i}.{name}"), t.clone());
                }
            }
        }
        let e = cfg.decoder_width;
        for i in 0..4 {
            p.insert(format!("dec.{i}.w"), xavier(cfg.channels[i], e, &mut rng));
            p.insert(format!("dec.{i}.b"), Tensor::zeros([e]));
        }
        p.insert("dec.fuse.w".into(), xavier(4 * e, e, &mut rng));
        p.insert("dec.fuse.b".into(), Tensor::zeros([e]));
        p.insert("dec.out.w".into(), xavier(e, 1, &mut rng));
        p.insert("dec.out.b".into(), Tensor::zeros([1]));
        Ok(ParamStore { tensors: p })
    }

    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| ModelError::Config(format!("missing parameter {name}")))
    }

    pub fn on_tape<'t>(&self, tape: &'t Tape, trainable: bool) -> TapeParams<'t> {
        TapeParams {
            tape,
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable)))
                .collect(),
        }
    }

    /// Checks that names and shapes are exactly those `cfg` initializes.
    pub fn check_against(&self, cfg: &PipelineConfig) -> Result<()> {
        let want = ParamStore::init(cfg)?;
        for (name, t) in &want.tensors {
            let have = self.get(name)?;
            if have.shape() != t.shape() {
                return Err(ModelError::Config(format!(
                    "parameter {name} has shape {:?}, config expects {:?}",
                    have.shape(),
                    t.shape()
                )));
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| !want.tensors.contains_key(*k)) {
            return Err(ModelError::Config(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }
}

/// Parameters bound to one tape.
pub struct TapeParams<'t> {
    pub tape: &'t Tape,
    pub vars: BTreeMap<String, Var<'t>>,
}

impl<'t> TapeParams<'t> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::Config(format!("missing parameter {name}")))
    }

    /// Attention weights of stage `i`; projections the variant never reads
    /// are filled with constants.
    fn attention(&self, i: usize, c: usize, heads: usize) -> Result<AttentionParams<Var<'t>>> {
        let filler = AttentionParams::identity(c);
        filler
            .try_map(|name, t| match self.vars.get(&format!("attn.{i}.{name}")) {
                Some(v) => Ok(*v),
                None => Ok::<_, ModelError>(self.tape.constant(t.clone())),
            })
            .map(|mut p| {
                p.heads = heads;
                p
            })
    }
}

/// One token set per encoder stage.
#[derive(Clone, Debug)]
pub struct MultiScaleFeatures<'t> {
    pub scales: Vec<VideoTokens<'t>>,
}

/// Gather index for a `k x k` window with stride `s` and zero padding `pad`
/// over `t` frames of `h x w` tokens. Row `(token, ky, kx)` of the gathered
/// tensor holds the input token under that tap, or zeros off the edge.
fn im2col_index(
    t: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    pad: usize,
) -> (Vec<Option<usize>>, usize, usize) {
    let (oh, ow) = (h / s, w / s);
    let mut index = Vec::with_capacity(t * oh * ow * k * k);
    for f in 0..t {
        for oy in 0..oh {
            for ox in 0..ow {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * s + ky) as isize - pad as isize;
                        let ix = (ox * s + kx) as isize - pad as isize;
                        let inside = (0..h as isize).contains(&iy) && (0..w as isize).contains(&ix);
                        index.push(inside.then(|| f * h * w + iy as usize * w + ix as usize));
                    }
                }
            }
        }
    }
    (index, oh, ow)
}

fn check_frames(frames: &[usize], cfg: &PipelineConfig) -> Result<()> {
    if frames != [cfg.t, cfg.h, cfg.w] {
        return Err(ModelError::Config(format!(
            "frames {frames:?} do not match configured [t, h, w] = [{}, {}, {}]",
            cfg.t, cfg.h, cfg.w
        )));
    }
    Ok(())
}

/// Per-frame hierarchical encoder. Each stage is an overlapping strided patch
/// embedding followed by a residual pointwise mix; frames never interact.
pub fn encode<'t>(
    p: &TapeParams<'t>,
    frames: &Var<'t>,
    cfg: &PipelineConfig,
) -> Result<MultiScaleFeatures<'t>> {
    cfg.validate()?;
    check_frames(&frames.shape(), cfg)?;
    let (t, mut h, mut w) = (cfg.t, cfg.h, cfg.w);
    let mut x = frames.reshape([t * h * w, 1])?;
    let mut scales = Vec::with_capacity(4);
    for i in 0..4 {
        let (k, pad) = patch_shape(i);
        let stride = if i == 0 { STRIDES[0] } else { 2 };
        let cin = x.shape()[1];
        let (index, oh, ow) = im2col_index(t, h, w, k, stride, pad);
        let n = t * oh * ow;
        let patches = x.gather(&index)?.reshape([n, k * k * cin])?;
        let y = patches
            .matmul(&p.get(&format!("enc.{i}.patch.w"))?)?
            .add(&p.get(&format!("enc.{i}.patch.b"))?)?
            .gelu();
        let mixed = y
            .matmul(&p.get(&format!("enc.{i}.mix.w"))?)?
            .add(&p.get(&format!("enc.{i}.mix.b"))?)?
            .gelu();
        x = y.add(&mixed)?;
        (h, w) = (oh, ow);
        scales.push(VideoTokens::new(cfg.geometry(i), x)?);
    }
    Ok(MultiScaleFeatures { scales })
}

/// Applies the configured attention variant to every scale independently.
pub fn temporalize<'t>(
    p: &TapeParams<'t>,
    features: &MultiScaleFeatures<'t>,
    cfg: &PipelineConfig,
) -> Result<MultiScaleFeatures<'t>> {
    let acfg = cfg.attention_config();
    let scales = features
        .scales
        .iter()
        .enumerate()
        .map(|(i, tokens)| {
            if cfg.attention == AttentionVariant::None {
                return Ok(*tokens);
            }
            let ap = p.attention(i, tokens.channels(), cfg.heads)?;
            Ok(attention::apply(cfg.attention, tokens, &ap, &acfg)?)
        })
        .collect::<Result<_>>()?;
    Ok(MultiScaleFeatures { scales })
}

/// Half-pixel bilinear resampling from `ih x iw` to `oh x ow` with edge
/// clamping, as a `[oh*ow, ih*iw]` matrix.
pub fn bilinear_matrix(ih: usize, iw: usize, oh: usize, ow: usize) -> Tensor {
    let taps = |o: usize, n_out: usize, n_in: usize| -> [(usize, f64); 2] {
        let src =
            ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        let frac = src - lo as f64;
        [(lo, 1.0 - frac), (hi, frac)]
    };
    let mut m = Tensor::zeros([oh * ow, ih * iw]);
    for y in 0..oh {
        for x in 0..ow {
            for (sy, wy) in taps(y, oh, ih) {
                for (sx, wx) in taps(x, ow, iw) {
                    let at = [y * ow + x, sy * iw + sx];
                    let prev = m.get(&at);
                    m.set(&at, prev + wy * wx);
                }
            }
        }
    }
    m
}

/// Pointwise decoder: per-scale projection to a common width, bilinear
/// upsampling to the stride-4 grid, concatenation, a fusing layer, a
/// one-channel head, then bilinear upsampling to `[t, h, w]` logits.
pub fn decode<'t>(
    p: &TapeParams<'t>,
    features: &MultiScaleFeatures<'t>,
    cfg: &PipelineConfig,
) -> Result<Var<'t>> {
    let (t, e) = (cfg.t, cfg.decoder_width);
    let base = cfg.geometry(0);
    let m0 = base.m();
    let mut parts = Vec::with_capacity(4);
    for (i, tokens) in features.scales.iter().enumerate() {
        let g = tokens.geometry;
        let y = tokens
            .data
            .matmul(&p.get(&format!("dec.{i}.w"))?)?
            .add(&p.get(&format!("dec.{i}.b"))?)?
            .reshape([t, g.m(), e])?;
        parts.push(if g.m() == m0 {
            y
        } else {
            let up = p
                .tape
                .constant(bilinear_matrix(g.rows, g.cols, base.rows, base.cols));
            up.matmul(&y)?
        });
    }
    let fused = Var::concat(&parts, 2)?
        .reshape([t * m0, 4 * e])?
        .matmul(&p.get("dec.fuse.w")?)?
        .add(&p.get("dec.fuse.b")?)?
        .gelu();
    let coarse = fused
        .matmul(&p.get("dec.out.w")?)?
        .add(&p.get("dec.out.b")?)?
        .reshape([t, m0, 1])?;
    let up = p
        .tape
        .constant(bilinear_matrix(base.rows, base.cols, cfg.h, cfg.w));
    Ok(up.matmul(&coarse)?.reshape([t, cfg.h, cfg.w])?)
}

/// Everything one forward pass produces.
pub struct Forward<'t> {
    pub encoded: MultiScaleFeatures<'t>,
    pub temporal: MultiScaleFeatures<'t>,
    /// `[t, h, w]`
    pub logits: Var<'t>,
}

pub fn forward<'t>(
    p: &TapeParams<'t>,
    frames: &Var<'t>,
    cfg: &PipelineConfig,
) -> Result<Forward<'t>> {
    let encoded = encode(p, frames, cfg)?;
    let temporal = temporalize(p, &encoded, cfg)?;
    let logits = decode(p, &temporal, cfg)?;
    Ok(Forward {
        encoded,
        temporal,
        logits,
    })
}

/// Shadow probabilities `[t, h, w]` for one clip's frames.
pub fn predict(params: &ParamStore, frames: &Tensor, cfg: &PipelineConfig) -> Result<Tensor> {
    let tape = Tape::new();
    let p = params.on_tape(&tape, false);
    let out = forward(&p, &tape.constant(frames.clone()), cfg)?;
    let probs = out.logits.sigmoid().value();
    Ok((*probs).clone())
}

#[cfg(test)]
mod tests;
