//! Video self-attention blocks over `t x m` token grids.
//!
//! Three variants share one block wrapper (pre-norm, attention core, output
//! projection, residual):
//!
//! * [`joint_spacetime_attention`]: one softmax over all `t*m` tokens.
//! * [`trajectory_attention`]: per-frame spatial softmax, then a temporal
//!   softmax over re-projected per-frame summaries.
//! * [`soda_block`]: per-location temporal softmax producing deformation
//!   tokens, then a spatial softmax over their re-projections.
//!
//! The two-stage cores run either through the streaming kernel in
//! [`fused`] or through the tape-composed reference in `stepwise`.

mod fused;
mod stepwise;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::tensor::{Result, Tensor, TensorError};
use fused::{Grouping, Inputs, Kernel, Layout};

pub use crate::autodiff::{mac_counter, reset_mac_counter};

/// Token grid: `t` frames of `rows x cols` locations, frame-major then raster.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub t: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Geometry {
    pub fn new(t: usize, rows: usize, cols: usize) -> Self {
        assert!(t >= 1 && rows >= 1 && cols >= 1, "empty token grid");
        Geometry { t, rows, cols }
    }

    /// Locations per frame.
    pub fn m(&self) -> usize {
        self.rows * self.cols
    }

    pub fn tokens(&self) -> usize {
        self.t * self.m()
    }

    pub(crate) fn layout(&self, grouping: Grouping) -> Layout {
        Layout {
            grouping,
            t: self.t,
            m: self.m(),
        }
    }
}

/// Tokens `[t*m, c]` plus the grid they came from.
#[derive(Clone, Copy, Debug)]
pub struct VideoTokens<'t> {
    pub geometry: Geometry,
    pub data: Var<'t>,
}

impl<'t> VideoTokens<'t> {
    pub fn new(geometry: Geometry, data: Var<'t>) -> Result<Self> {
        let s = data.shape();
        if s.len() != 2 || s[0] != geometry.tokens() {
            return Err(TensorError::Invalid {
                op: "video_tokens",
                msg: format!("shape {s:?} does not hold {} tokens", geometry.tokens()),
            });
        }
        Ok(VideoTokens { geometry, data })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[1]
    }
}

/// Projection weights of one attention block. All matrices are `c x c` and
/// act on row vectors (`x W`).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T = Tensor> {
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
    pub hat_q: T,
    pub hat_k: T,
    pub hat_v: T,
    pub w_out: T,
    pub heads: usize,
}

pub const PARAM_NAMES: [&str; 7] = ["w_q", "w_k", "w_v", "hat_q", "hat_k", "hat_v", "w_out"];

impl<T> AttentionParams<T> {
    pub fn named(&self) -> [(&'static str, &T); 7] {
        [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("hat_q", &self.hat_q),
            ("hat_k", &self.hat_k),
            ("hat_v", &self.hat_v),
            ("w_out", &self.w_out),
        ]
    }

    pub fn try_map<U, E>(
        &self,
        mut f: impl FnMut(&str, &T) -> std::result::Result<U, E>,
    ) -> std::result::Result<AttentionParams<U>, E> {
        Ok(AttentionParams {
            w_q: f("w_q", &self.w_q)?,
            w_k: f("w_k", &self.w_k)?,
            w_v: f("w_v", &self.w_v)?,
            hat_q: f("hat_q", &self.hat_q)?,
            hat_k: f("hat_k", &self.hat_k)?,
            hat_v: f("hat_v", &self.hat_v)?,
            w_out: f("w_out", &self.w_out)?,
            heads: self.heads,
        })
    }
}

/// Uniform fan-based ("Xavier") sample for a `fan_in x fan_out` matrix.
pub fn xavier<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform([fan_in, fan_out], -bound, bound, rng)
}

impl AttentionParams {
    /// Xavier projections and a zero output projection, so a fresh block is
    /// the identity map.
    pub fn init<R: Rng + ?Sized>(c: usize, heads: usize, rng: &mut R) -> Self {
        assert!(
            heads >= 1 && c.is_multiple_of(heads),
            "{heads} heads do not divide {c}"
        );
        AttentionParams {
            w_q: xavier(c, c, rng),
            w_k: xavier(c, c, rng),
            w_v: xavier(c, c, rng),
            hat_q: xavier(c, c, rng),
            hat_k: xavier(c, c, rng),
            hat_v: xavier(c, c, rng),
            w_out: Tensor::zeros([c, c]),
            heads,
        }
    }

    pub fn identity(c: usize) -> Self {
        let eye = Tensor::eye(c);
        AttentionParams {
            w_q: eye.clone(),
            w_k: eye.clone(),
            w_v: eye.clone(),
            hat_q: eye.clone(),
            hat_k: eye.clone(),
            hat_v: eye.clone(),
            w_out: eye,
            heads: 1,
        }
    }

    pub fn on_tape<'t>(&self, tape: &'t Tape, trainable: bool) -> AttentionParams<Var<'t>> {
        let r: std::result::Result<_, std::convert::Infallible> =
            self.try_map(|_, t| Ok(tape.leaf(t.clone(), trainable)));
        r.unwrap()
    }
}

/// Dot-product temperature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ScaleMode {
    /// `1/sqrt(c/heads)`
    #[default]
    SqrtHeadDim,
    /// `1/sqrt(n)` with `n = t*m` tokens.
    SqrtN,
}

impl ScaleMode {
    pub fn factor(&self, c: usize, heads: usize, n: usize) -> f64 {
        match self {
            ScaleMode::SqrtHeadDim => 1.0 / ((c / heads) as f64).sqrt(),
            ScaleMode::SqrtN => 1.0 / (n as f64).sqrt(),
        }
    }
}

impl fmt::Display for ScaleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScaleMode::SqrtHeadDim => "sqrt_head_dim",
            ScaleMode::SqrtN => "sqrt_n",
        })
    }
}

impl FromStr for ScaleMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sqrt_head_dim" => Ok(ScaleMode::SqrtHeadDim),
            "sqrt_n" => Ok(ScaleMode::SqrtN),
            _ => Err(format!("unknown scale mode {s:?}")),
        }
    }
}

/// How the two-stage cores are evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Implementation {
    /// Streaming kernel over query chunks of the given size.
    Streaming { chunk: usize },
    /// Tape-composed, fully materialized.
    Stepwise,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionConfig {
    pub scale: ScaleMode,
    pub implementation: Implementation,
    pub norm_eps: f64,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            scale: ScaleMode::SqrtHeadDim,
            implementation: Implementation::Streaming { chunk: 64 },
            norm_eps: 1e-5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AttentionVariant {
    #[default]
    None,
    Joint,
    Trajectory,
    Soda,
}

impl AttentionVariant {
    /// Parameters the variant actually reads.
    pub fn param_names(&self) -> &'static [&'static str] {
        match self {
            AttentionVariant::None => &[],
            AttentionVariant::Joint => &["w_q", "w_k", "w_v", "w_out"],
            AttentionVariant::Trajectory | AttentionVariant::Soda => &PARAM_NAMES,
        }
    }
}

impl fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionVariant::None => "none",
            AttentionVariant::Joint => "joint",
            AttentionVariant::Trajectory => "trajectory",
            AttentionVariant::Soda => "soda",
        })
    }
}

impl FromStr for AttentionVariant {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(AttentionVariant::None),
            "joint" => Ok(AttentionVariant::Joint),
            "trajectory" => Ok(AttentionVariant::Trajectory),
            "soda" => Ok(AttentionVariant::Soda),
            _ => Err(format!("unknown attention variant {s:?}")),
        }
    }
}

/// Time-attended values `[n, m, c]`: entry `(st, s')` summarizes how the
/// content at `st` appears at location `s'` across frames.
#[derive(Clone, Copy, Debug)]
pub struct DeformationField<'t> {
    pub values: Var<'t>,
    pub geometry: Geometry,
}

pub fn project_qkv<'t>(
    z: &Var<'t>,
    p: &AttentionParams<Var<'t>>,
) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
    Ok((z.matmul(&p.w_q)?, z.matmul(&p.w_k)?, z.matmul(&p.w_v)?))
}

/// For every token `st` and location `s'`, a softmax over frames `t'` of
/// `<q_st, k_s't'>` weighting `v_s't'`.
pub fn temporal_attention<'t>(
    q: &Var<'t>,
    k: &Var<'t>,
    v: &Var<'t>,
    geometry: Geometry,
    heads: usize,
    scale: f64,
) -> Result<DeformationField<'t>> {
    stepwise::temporal_attention(q, k, v, geometry, heads, scale)
}

/// Re-projects the deformation field. The query of token `st` is its own
/// location's entry `(st, s)`. Returns `(q^ [n,c], k^ [n,m,c], v^ [n,m,c])`.
pub fn deformation_projections<'t>(
    field: &DeformationField<'t>,
    p: &AttentionParams<Var<'t>>,
) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
    let g = field.geometry;
    let s = field.values.shape();
    if s.len() != 3 || s[0] != g.tokens() || s[1] != g.m() {
        return Err(TensorError::Invalid {
            op: "deformation_projections",
            msg: format!("field shape {s:?} does not match geometry {g:?}"),
        });
    }
    stepwise::reproject(&field.values, g.layout(Grouping::Soda), p)
}

/// Softmax over locations of `<q^_st, k^_sts'>` weighting `v^_sts'`.
pub fn spatial_aggregation<'t>(
    q_hat: &Var<'t>,
    k_hat: &Var<'t>,
    v_hat: &Var<'t>,
    heads: usize,
    scale: f64,
) -> Result<Var<'t>> {
    stepwise::aggregate(q_hat, k_hat, v_hat, heads, scale)
}

fn streaming_core<'t>(
    q: &Var<'t>,
    k: &Var<'t>,
    v: &Var<'t>,
    p: &AttentionParams<Var<'t>>,
    layout: Layout,
    scale: f64,
    chunk: usize,
) -> Result<Var<'t>> {
    let kernel = Kernel {
        layout,
        heads: p.heads,
        scale,
        chunk: chunk.max(1),
    };
    let vals = [q, k, v, &p.hat_q, &p.hat_k, &p.hat_v].map(|x| x.value());
    let c = vals[0].shape()[1];
    for w in &vals[3..] {
        if w.shape() != [c, c] {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                lhs: vec![c, c],
                rhs: w.shape().to_vec(),
            });
        }
    }
    let inputs = Inputs {
        q: vals[0].data(),
        k: vals[1].data(),
        v: vals[2].data(),
        wq: vals[3].data(),
        wk: vals[4].data(),
        wv: vals[5].data(),
        c,
    };
    let (out, _) = kernel.forward(&inputs, false);
    let out = Tensor::new(vals[0].shape().to_vec(), out)?;
    Ok(q.tape().custom(
        Box::new(kernel),
        &[*q, *k, *v, p.hat_q, p.hat_k, p.hat_v],
        out,
    ))
}

fn two_stage_core<'t>(
    q: &Var<'t>,
    k: &Var<'t>,
    v: &Var<'t>,
    p: &AttentionParams<Var<'t>>,
    layout: Layout,
    scale: f64,
    implementation: Implementation,
) -> Result<Var<'t>> {
    match implementation {
        Implementation::Streaming { chunk } => streaming_core(q, k, v, p, layout, scale, chunk),
        Implementation::Stepwise => stepwise::two_stage(q, k, v, p, layout, scale),
    }
}

/// Pre-norm, core, output projection, residual.
fn wrap_block<'t>(
    tokens: &VideoTokens<'t>,
    p: &AttentionParams<Var<'t>>,
    cfg: &AttentionConfig,
    core: impl FnOnce(&Var<'t>, &Var<'t>, &Var<'t>, f64) -> Result<Var<'t>>,
) -> Result<VideoTokens<'t>> {
    let x = tokens.data;
    let z = x.layer_norm(cfg.norm_eps)?;
    let (q, k, v) = project_qkv(&z, p)?;
    stepwise::validate(&q, &k, &v, tokens.geometry, p.heads)?;
    let scale = cfg
        .scale
        .factor(tokens.channels(), p.heads, tokens.geometry.tokens());
    let branch = core(&q, &k, &v, scale)?.matmul(&p.w_out)?;
    VideoTokens::new(tokens.geometry, x.add(&branch)?)
}

pub fn soda_block<'t>(
    tokens: &VideoTokens<'t>,
    p: &AttentionParams<Var<'t>>,
    cfg: &AttentionConfig,
) -> Result<VideoTokens<'t>> {
    let layout = tokens.geometry.layout(Grouping::Soda);
    wrap_block(tokens, p, cfg, |q, k, v, s| {
        two_stage_core(q, k, v, p, layout, s, cfg.implementation)
    })
}

pub fn trajectory_attention<'t>(
    tokens: &VideoTokens<'t>,
    p: &AttentionParams<Var<'t>>,
    cfg: &AttentionConfig,
) -> Result<VideoTokens<'t>> {
    let layout = tokens.geometry.layout(Grouping::Trajectory);
    wrap_block(tokens, p, cfg, |q, k, v, s| {
        two_stage_core(q, k, v, p, layout, s, cfg.implementation)
    })
}

pub fn joint_spacetime_attention<'t>(
    tokens: &VideoTokens<'t>,
    p: &AttentionParams<Var<'t>>,
    cfg: &AttentionConfig,
) -> Result<VideoTokens<'t>> {
    wrap_block(tokens, p, cfg, |q, k, v, s| {
        stepwise::joint(q, k, v, p.heads, s)
    })
}

/// Applies `variant`; `None` passes tokens through untouched.
pub fn apply<'t>(
    variant: AttentionVariant,
    tokens: &VideoTokens<'t>,
    p: &AttentionParams<Var<'t>>,
    cfg: &AttentionConfig,
) -> Result<VideoTokens<'t>> {
    match variant {
        AttentionVariant::None => Ok(*tokens),
        AttentionVariant::Joint => joint_spacetime_attention(tokens, p, cfg),
        AttentionVariant::Trajectory => trajectory_attention(tokens, p, cfg),
        AttentionVariant::Soda => soda_block(tokens, p, cfg),
    }
}

/// Second-stage (spatial) SODA weights `[heads, n, m]` for every query, as
/// used inside [`soda_block`] on `tokens`.
pub fn soda_spatial_weights(
    tokens: &Tensor,
    geometry: Geometry,
    p: &AttentionParams,
    cfg: &AttentionConfig,
) -> Result<Tensor> {
    let tape = Tape::new();
    let x = tape.constant(tokens.clone());
    let vp = p.on_tape(&tape, false);
    let z = x.layer_norm(cfg.norm_eps)?;
    let (q, k, v) = project_qkv(&z, &vp)?;
    stepwise::validate(&q, &k, &v, geometry, p.heads)?;
    let c = tokens.shape()[1];
    let kernel = Kernel {
        layout: geometry.layout(Grouping::Soda),
        heads: p.heads,
        scale: cfg.scale.factor(c, p.heads, geometry.tokens()),
        chunk: 64,
    };
    let (qv, kv, vv) = (q.value(), k.value(), v.value());
    let inputs = Inputs {
        q: qv.data(),
        k: kv.data(),
        v: vv.data(),
        wq: p.hat_q.data(),
        wk: p.hat_k.data(),
        wv: p.hat_v.data(),
        c,
    };
    let (_, w) = kernel.forward(&inputs, true);
    Tensor::new(
        [p.heads, geometry.tokens(), geometry.m()],
        w.expect("requested"),
    )
}

/// MACs spent by one forward pass of `variant` on a `t x m x c` grid,
/// measured by running it.
pub fn measure_forward_macs<R: Rng + ?Sized>(
    variant: AttentionVariant,
    geometry: Geometry,
    c: usize,
    heads: usize,
    rng: &mut R,
) -> Result<u64> {
    let tape = Tape::new();
    let p = AttentionParams::init(c, heads, rng).on_tape(&tape, false);
    let x = tape.constant(Tensor::uniform([geometry.tokens(), c], -1.0, 1.0, rng));
    let tokens = VideoTokens::new(geometry, x)?;
    let cfg = AttentionConfig::default();
    reset_mac_counter();
    apply(variant, &tokens, &p, &cfg)?;
    Ok(mac_counter())
}

#[cfg(test)]
mod tests;
