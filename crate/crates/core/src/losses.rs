//! Segmentation objective: BCE, per-frame Lovász hinge, weighted total.

use crate::autodiff::Var;
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Weight of the Lovász hinge term.
    pub hinge: f64,
    /// Weight of the contrastive term.
    pub contrast: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            hinge: 1.0,
            contrast: 0.1,
        }
    }
}

fn check_targets(op: &'static str, logits: &[usize], targets: &Tensor) -> Result<()> {
    if logits != targets.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: logits.to_vec(),
            rhs: targets.shape().to_vec(),
        });
    }
    if let Some(bad) = targets.data().iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(TensorError::Invalid {
            op,
            msg: format!("target value {bad} is not binary"),
        });
    }
    Ok(())
}

/// Mean over pixels of `softplus(x) - x*y`.
pub fn bce_loss<'t>(logits: &Var<'t>, targets: &Tensor) -> Result<Var<'t>> {
    check_targets("bce_loss", &logits.shape(), targets)?;
    let y = logits.tape().constant(targets.clone());
    Ok(logits.softplus().sub(&logits.mul(&y)?)?.mean())
}

fn frame_split(shape: &[usize]) -> Result<(usize, usize)> {
    if shape.is_empty() {
        return Err(TensorError::Invalid {
            op: "lovasz_hinge",
            msg: "need at least a frame axis".into(),
        });
    }
    Ok((shape[0], shape[1..].iter().product()))
}

/// Per-frame orderings of the hinge errors, descending, ties by pixel index.
pub fn lovasz_orders(logits: &Tensor, targets: &Tensor) -> Result<Vec<Vec<usize>>> {
    check_targets("lovasz_hinge", logits.shape(), targets)?;
    let (t, p) = frame_split(logits.shape())?;
    Ok((0..t)
        .map(|f| {
            let x = &logits.data()[f * p..(f + 1) * p];
            let y = &targets.data()[f * p..(f + 1) * p];
            let e: Vec<f64> = x
                .iter()
                .zip(y)
                .map(|(x, y)| 1.0 - (2.0 * y - 1.0) * x)
                .collect();
            let mut order: Vec<usize> = (0..p).collect();
            order.sort_by(|&a, &b| e[b].total_cmp(&e[a]).then(a.cmp(&b)));
            order
        })
        .collect())
}

/// Discrete gradient of the Jaccard loss along labels taken in sorted order.
fn jaccard_weights(sorted_labels: &[f64]) -> Vec<f64> {
    let gts: f64 = sorted_labels.iter().sum();
    let mut weights = Vec::with_capacity(sorted_labels.len());
    let (mut pos, mut neg, mut prev) = (0.0, 0.0, 0.0);
    for &y in sorted_labels {
        pos += y;
        neg += 1.0 - y;
        let jac = 1.0 - (gts - pos) / (gts + neg);
        weights.push(jac - prev);
        prev = jac;
    }
    weights
}

/// Lovász hinge with each frame's sort order fixed to `orders`. With the
/// orders from [`lovasz_orders`] this is the loss itself; holding them fixed
/// makes the function smooth for finite-difference checks.
pub fn lovasz_hinge_with_orders<'t>(
    logits: &Var<'t>,
    targets: &Tensor,
    orders: &[Vec<usize>],
) -> Result<Var<'t>> {
    let shape = logits.shape();
    check_targets("lovasz_hinge", &shape, targets)?;
    let (t, p) = frame_split(&shape)?;
    if orders.len() != t || orders.iter().any(|o| o.len() != p) {
        return Err(TensorError::Invalid {
            op: "lovasz_hinge",
            msg: format!("orders do not cover {t} frames of {p} pixels"),
        });
    }
    let tape = logits.tape();
    let signs = tape.constant(targets.map(|y| 2.0 * y - 1.0).reshape([t * p, 1])?);
    let errors = logits
        .reshape([t * p, 1])?
        .mul(&signs)?
        .neg()
        .add_scalar(1.0)
        .relu();
    let mut index = Vec::with_capacity(t * p);
    let mut weights = Vec::with_capacity(t * p);
    for (f, order) in orders.iter().enumerate() {
        let labels: Vec<f64> = order.iter().map(|&i| targets.data()[f * p + i]).collect();
        index.extend(order.iter().map(|&i| Some(f * p + i)));
        weights.extend(jaccard_weights(&labels));
    }
    let w = tape.constant(Tensor::new([t * p, 1], weights)?);
    Ok(errors
        .gather(&index)?
        .mul(&w)?
        .sum_all()
        .scale(1.0 / t as f64))
}

/// Per-frame Lovász hinge (binary Jaccard surrogate), averaged over frames.
pub fn lovasz_hinge_loss<'t>(logits: &Var<'t>, targets: &Tensor) -> Result<Var<'t>> {
    let orders = lovasz_orders(&logits.value(), targets)?;
    lovasz_hinge_with_orders(logits, targets, &orders)
}

/// `bce + w.hinge * hinge + w.contrast * contrast`.
pub fn final_loss<'t>(
    bce: &Var<'t>,
    hinge: &Var<'t>,
    contrast: &Var<'t>,
    w: &LossWeights,
) -> Result<Var<'t>> {
    bce.add(&hinge.scale(w.hinge))?
        .add(&contrast.scale(w.contrast))
}
