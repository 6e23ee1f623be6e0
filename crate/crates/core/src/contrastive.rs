//! Shadow-region contrastive loss with massive positive pairs.
//!
//! Every shadow feature in a batch is an anchor; all other shadow features
//! in the batch (other frames, other clips) are its positives and every
//! non-shadow feature is a negative.

use std::fmt;
use std::str::FromStr;

use crate::attention::VideoTokens;
use crate::autodiff::Var;
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ContrastVariant {
    #[default]
    None,
    Scotch,
}

impl fmt::Display for ContrastVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContrastVariant::None => "none",
            ContrastVariant::Scotch => "scotch",
        })
    }
}

impl FromStr for ContrastVariant {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(ContrastVariant::None),
            "scotch" => Ok(ContrastVariant::Scotch),
            _ => Err(format!("unknown contrast variant {s:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContrastConfig {
    pub tau: f64,
    /// L2-normalize pooled features (cosine similarities).
    pub normalize: bool,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        ContrastConfig {
            tau: 0.1,
            normalize: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegionLabel {
    Shadow,
    NonShadow,
}

#[derive(Clone, Copy, Debug)]
pub struct RegionFeature<'t> {
    /// `[c]`
    pub vector: Var<'t>,
    pub label: RegionLabel,
    pub clip_id: usize,
    pub frame_id: usize,
}

/// Anchors `[q, c]`, each with `P` positives `[q, P, c]` and `N` negatives
/// `[q, N, c]`.
#[derive(Clone, Copy, Debug)]
pub struct ContrastBatch<'t> {
    pub anchors: Var<'t>,
    pub positives: Var<'t>,
    pub negatives: Var<'t>,
    pub tau: f64,
}

/// Nearest-cell downsampling of `[t, h, w]` masks to `[t, rows, cols]`: a
/// cell is shadow iff at least half of the pixels it covers are.
pub fn downsample_masks(masks: &Tensor, rows: usize, cols: usize) -> Result<Tensor> {
    let [t, h, w] = masks.shape()[..] else {
        return Err(TensorError::Invalid {
            op: "downsample_masks",
            msg: format!("expected [t, h, w], got {:?}", masks.shape()),
        });
    };
    if rows == 0 || cols == 0 || h % rows != 0 || w % cols != 0 {
        return Err(TensorError::Invalid {
            op: "downsample_masks",
            msg: format!("{h}x{w} does not tile into {rows}x{cols}"),
        });
    }
    let (dy, dx) = (h / rows, w / cols);
    let mut out = Tensor::zeros([t, rows, cols]);
    for f in 0..t {
        for i in 0..rows {
            for j in 0..cols {
                let mut count = 0;
                for y in i * dy..(i + 1) * dy {
                    for x in j * dx..(j + 1) * dx {
                        count += (masks.get(&[f, y, x]) == 1.0) as usize;
                    }
                }
                if 2 * count >= dy * dx {
                    out.set(&[f, i, j], 1.0);
                }
            }
        }
    }
    Ok(out)
}

/// Masked average pooling per frame and class, shadow first within a frame.
/// Classes absent from a frame's coarse mask yield no feature.
pub fn pool_region_features<'t>(
    features: &VideoTokens<'t>,
    masks: &Tensor,
    clip_id: usize,
    normalize: bool,
) -> Result<Vec<RegionFeature<'t>>> {
    let g = features.geometry;
    if masks.shape() != [g.t, g.rows, g.cols] {
        return Err(TensorError::ShapeMismatch {
            op: "pool_region_features",
            lhs: vec![g.t, g.rows, g.cols],
            rhs: masks.shape().to_vec(),
        });
    }
    let (m, n, c) = (g.m(), g.tokens(), features.channels());
    let mut weights = Vec::new();
    let mut meta = Vec::new();
    for f in 0..g.t {
        for label in [RegionLabel::Shadow, RegionLabel::NonShadow] {
            let want = (label == RegionLabel::Shadow) as u8 as f64;
            let frame = &masks.data()[f * m..(f + 1) * m];
            let count = frame.iter().filter(|&&v| v == want).count();
            if count == 0 {
                continue;
            }
            let mut row = vec![0.0; n];
            for (s, &v) in frame.iter().enumerate() {
                if v == want {
                    row[f * m + s] = 1.0 / count as f64;
                }
            }
            weights.extend(row);
            meta.push((f, label));
        }
    }
    if meta.is_empty() {
        return Ok(Vec::new());
    }
    let tape = features.data.tape();
    let pool = tape.constant(Tensor::new([meta.len(), n], weights)?);
    let mut pooled = pool.matmul(&features.data)?;
    if normalize {
        pooled = pooled.l2_normalize(1e-12)?;
    }
    meta.into_iter()
        .enumerate()
        .map(|(r, (frame_id, label))| {
            Ok(RegionFeature {
                vector: pooled.slice(0, r, 1)?.reshape([c])?,
                label,
                clip_id,
                frame_id,
            })
        })
        .collect()
}

/// Mean over anchors of `-log(P / (P + N))`, `P = sum exp(v.v+ / tau)`,
/// `N = sum exp(v.v- / tau)`, via max-shifted log-sum-exp.
pub fn scotch_loss<'t>(batch: &ContrastBatch<'t>) -> Result<Var<'t>> {
    let invalid = |msg: String| TensorError::Invalid {
        op: "scotch_loss",
        msg,
    };
    if !(batch.tau > 0.0) {
        return Err(invalid(format!(
            "temperature must be positive, got {}",
            batch.tau
        )));
    }
    let a = batch.anchors.shape();
    let (p, n) = (batch.positives.shape(), batch.negatives.shape());
    if a.len() != 2
        || p.len() != 3
        || n.len() != 3
        || p[0] != a[0]
        || n[0] != a[0]
        || p[2] != a[1]
        || n[2] != a[1]
    {
        return Err(TensorError::ShapeMismatch {
            op: "scotch_loss",
            lhs: a,
            rhs: p,
        });
    }
    if p[1] == 0 || n[1] == 0 {
        return Err(invalid("empty positive or negative set".into()));
    }
    let (q, c) = (a[0], a[1]);
    let anchors = batch.anchors.reshape([q, 1, c])?;
    let sims = |set: &Var<'t>, k: usize| -> Result<Var<'t>> {
        Ok(anchors
            .matmul(&set.transpose()?)?
            .reshape([q, k])?
            .scale(1.0 / batch.tau))
    };
    let pos = sims(&batch.positives, p[1])?;
    let neg = sims(&batch.negatives, n[1])?;
    let all = Var::concat(&[pos, neg], 1)?.logsumexp()?;
    Ok(all.sub(&pos.logsumexp()?)?.mean())
}

fn stack<'t>(rows: &[Var<'t>]) -> Result<Var<'t>> {
    let c = rows[0].shape()[0];
    let rows: Vec<Var> = rows
        .iter()
        .map(|r| r.reshape([1, c]))
        .collect::<Result<_>>()?;
    Var::concat(&rows, 0)
}

/// All-pairs batch over `features`, or `None` when fewer than two shadow
/// features or no non-shadow feature are present.
pub fn build_batch<'t>(
    features: &[RegionFeature<'t>],
    tau: f64,
) -> Result<Option<ContrastBatch<'t>>> {
    let pick = |l| -> Vec<Var<'t>> {
        features
            .iter()
            .filter(|f| f.label == l)
            .map(|f| f.vector)
            .collect()
    };
    let (shadow, other) = (pick(RegionLabel::Shadow), pick(RegionLabel::NonShadow));
    let (a, b) = (shadow.len(), other.len());
    if a < 2 || b == 0 {
        return Ok(None);
    }
    let c = shadow[0].shape()[0];
    let s = stack(&shadow)?;
    let u = stack(&other)?;
    let pos_index: Vec<Option<usize>> = (0..a)
        .flat_map(|i| (0..a).filter(move |&j| j != i).map(Some))
        .collect();
    let neg_index: Vec<Option<usize>> = (0..a).flat_map(|_| (0..b).map(Some)).collect();
    Ok(Some(ContrastBatch {
        anchors: s,
        positives: s.gather(&pos_index)?.reshape([a, a - 1, c])?,
        negatives: u.gather(&neg_index)?.reshape([a, b, c])?,
        tau,
    }))
}

/// SCOTCH over a pool of region features; a scalar zero when the pool has
/// no usable anchor.
pub fn scotch_from_features<'t>(
    tape: &'t crate::autodiff::Tape,
    features: &[RegionFeature<'t>],
    cfg: &ContrastConfig,
) -> Result<Var<'t>> {
    match build_batch(features, cfg.tau)? {
        Some(batch) => scotch_loss(&batch),
        None => Ok(tape.constant(Tensor::scalar(0.0))),
    }
}
