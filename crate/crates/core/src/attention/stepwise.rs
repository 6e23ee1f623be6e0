//! Unchunked two-stage attention built from tape primitives.
//!
//! Materializes the full `[n, groups, c]` summary tensor. Used as the
//! reference path for the streaming kernel and for inspecting intermediates.

use super::fused::{Grouping, Layout};
use super::{AttentionParams, DeformationField, Geometry};
use crate::autodiff::Var;
use crate::tensor::{Result, TensorError};

fn split_heads<'t>(x: &Var<'t>, heads: usize) -> Result<Var<'t>> {
    let s = x.shape();
    let (n, c) = (s[0], s[1]);
    x.reshape([n, heads, c / heads])?.permute(&[1, 0, 2])
}

pub(crate) fn validate(q: &Var, k: &Var, v: &Var, geom: Geometry, heads: usize) -> Result<()> {
    let s = q.shape();
    if s.len() != 2 || k.shape() != s || v.shape() != s {
        return Err(TensorError::ShapeMismatch {
            op: "attention",
            lhs: s,
            rhs: k.shape(),
        });
    }
    if s[0] != geom.tokens() {
        return Err(TensorError::Invalid {
            op: "attention",
            msg: format!(
                "{} tokens but t*m = {}*{} = {}",
                s[0],
                geom.t,
                geom.m(),
                geom.tokens()
            ),
        });
    }
    if heads == 0 || !s[1].is_multiple_of(heads) {
        return Err(TensorError::Invalid {
            op: "attention",
            msg: format!("{heads} heads do not divide {} channels", s[1]),
        });
    }
    Ok(())
}

/// First stage: per query, one softmax inside each group. Returns `[n, groups, c]`.
pub(crate) fn first_stage<'t>(
    q: &Var<'t>,
    k: &Var<'t>,
    v: &Var<'t>,
    layout: Layout,
    heads: usize,
    scale: f64,
) -> Result<Var<'t>> {
    let [n, c] = q.shape()[..] else {
        unreachable!()
    };
    let (t, m, dh) = (layout.t, layout.m, c / heads);
    let qh = split_heads(q, heads)?;
    let kh = split_heads(k, heads)?.transpose()?;
    let logits = qh.matmul(&kh)?.scale(scale).reshape([heads, n, t, m])?;
    let vh = v.reshape([t, m, heads, dh])?;
    let y = match layout.grouping {
        Grouping::Soda => {
            let w = logits.softmax(2)?.permute(&[0, 3, 1, 2])?;
            let vg = vh.permute(&[2, 1, 0, 3])?;
            w.matmul(&vg)?.permute(&[2, 1, 0, 3])?
        }
        Grouping::Trajectory => {
            let w = logits.softmax(3)?.permute(&[0, 2, 1, 3])?;
            let vg = vh.permute(&[2, 0, 1, 3])?;
            w.matmul(&vg)?.permute(&[2, 1, 0, 3])?
        }
    };
    y.reshape([n, layout.groups(), c])
}

/// Re-projects `[n, groups, c]` summaries; the query comes from each
/// token's own group.
pub(crate) fn reproject<'t>(
    y: &Var<'t>,
    layout: Layout,
    p: &AttentionParams<Var<'t>>,
) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
    let [n, g, c] = y.shape()[..] else {
        unreachable!()
    };
    let flat = y.reshape([n * g, c])?;
    let diag: Vec<Option<usize>> = (0..n).map(|i| Some(i * g + layout.own_group(i))).collect();
    let q_hat = flat.gather(&diag)?.matmul(&p.hat_q)?;
    let k_hat = flat.matmul(&p.hat_k)?.reshape([n, g, c])?;
    let v_hat = flat.matmul(&p.hat_v)?.reshape([n, g, c])?;
    Ok((q_hat, k_hat, v_hat))
}

/// Second stage: per query, one softmax across groups.
pub(crate) fn aggregate<'t>(
    q_hat: &Var<'t>,
    k_hat: &Var<'t>,
    v_hat: &Var<'t>,
    heads: usize,
    scale: f64,
) -> Result<Var<'t>> {
    let ks = k_hat.shape();
    if ks.len() != 3 || v_hat.shape() != ks || q_hat.shape() != [ks[0], ks[2]] {
        return Err(TensorError::ShapeMismatch {
            op: "aggregate",
            lhs: q_hat.shape(),
            rhs: ks,
        });
    }
    let (n, g, c) = (ks[0], ks[1], ks[2]);
    let dh = c / heads;
    let qh = q_hat.reshape([n, heads, 1, dh])?;
    let kh = k_hat.reshape([n, g, heads, dh])?.permute(&[0, 2, 3, 1])?;
    let w = qh.matmul(&kh)?.scale(scale).softmax(3)?;
    let vh = v_hat.reshape([n, g, heads, dh])?.permute(&[0, 2, 1, 3])?;
    w.matmul(&vh)?.reshape([n, c])
}

pub(crate) fn two_stage<'t>(
    q: &Var<'t>,
    k: &Var<'t>,
    v: &Var<'t>,
    p: &AttentionParams<Var<'t>>,
    layout: Layout,
    scale: f64,
) -> Result<Var<'t>> {
    let y = first_stage(q, k, v, layout, p.heads, scale)?;
    let (qh, kh, vh) = reproject(&y, layout, p)?;
    aggregate(&qh, &kh, &vh, p.heads, scale)
}

pub(crate) fn temporal_attention<'t>(
    q: &Var<'t>,
    k: &Var<'t>,
    v: &Var<'t>,
    geom: Geometry,
    heads: usize,
    scale: f64,
) -> Result<DeformationField<'t>> {
    validate(q, k, v, geom, heads)?;
    let layout = geom.layout(Grouping::Soda);
    Ok(DeformationField {
        values: first_stage(q, k, v, layout, heads, scale)?,
        geometry: geom,
    })
}

/// Standard softmax attention over all `n` tokens. Returns `[n, c]`.
pub(crate) fn joint<'t>(
    q: &Var<'t>,
    k: &Var<'t>,
    v: &Var<'t>,
    heads: usize,
    scale: f64,
) -> Result<Var<'t>> {
    let [n, c] = q.shape()[..] else {
        unreachable!()
    };
    let qh = split_heads(q, heads)?;
    let kh = split_heads(k, heads)?.transpose()?;
    let w = qh.matmul(&kh)?.scale(scale).softmax(2)?;
    let vh = split_heads(v, heads)?;
    w.matmul(&vh)?.permute(&[1, 0, 2])?.reshape([n, c])
}
