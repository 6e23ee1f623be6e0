use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{forward, AdamW, ModelError, ParamStore, PipelineConfig, Result, TapeParams};
use crate::autodiff::{Tape, Var};
use crate::contrastive::{
    downsample_masks, pool_region_features, scotch_from_features, ContrastVariant,
};
use crate::data::ShadowClip;
use crate::losses::{
    bce_loss, final_loss, lovasz_hinge_loss, lovasz_hinge_with_orders, lovasz_orders,
};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Random horizontal flips.
    pub flip: bool,
    /// Seed of the shuffling and flipping stream.
    pub seed: u64,
    /// Cosine-decay the learning rate from `lr` to 0 over all steps.
    pub cosine: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 4,
            lr: 1e-3,
            weight_decay: 0.01,
            flip: true,
            seed: 0,
            cosine: true,
        }
    }
}

impl TrainConfig {
    /// Applies one `key=value` setting. Returns `Ok(false)` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn p<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
        where
            T::Err: fmt::Display,
        {
            value
                .parse()
                .map_err(|e| ModelError::Config(format!("{key}={value}: {e}")))
        }
        match key {
            "epochs" => self.epochs = p(key, value)?,
            "batch_size" => self.batch_size = p(key, value)?,
            "lr" => self.lr = p(key, value)?,
            "weight_decay" => self.weight_decay = p(key, value)?,
            "flip" => self.flip = p(key, value)?,
            "train_seed" => self.seed = p(key, value)?,
            "cosine" => self.cosine = p(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "epochs={}", self.epochs)?;
        writeln!(f, "batch_size={}", self.batch_size)?;
        writeln!(f, "lr={}", self.lr)?;
        writeln!(f, "weight_decay={}", self.weight_decay)?;
        writeln!(f, "flip={}", self.flip)?;
        writeln!(f, "train_seed={}", self.seed)?;
        writeln!(f, "cosine={}", self.cosine)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct LossComponents {
    pub bce: f64,
    pub hinge: f64,
    pub contrast: f64,
    pub total: f64,
}

impl LossComponents {
    fn check(&self, step: u64) -> Result<()> {
        for (component, v) in [
            ("bce", self.bce),
            ("hinge", self.hinge),
            ("contrast", self.contrast),
            ("total", self.total),
        ] {
            if !v.is_finite() {
                return Err(ModelError::NonFinite { step, component });
            }
        }
        Ok(())
    }
}

/// Loss terms of a batch on one tape: BCE and Lovász hinge averaged over
/// clips, the contrastive term over regions pooled from the whole batch.
pub struct BatchLoss<'t> {
    pub bce: Var<'t>,
    pub hinge: Var<'t>,
    pub contrast: Var<'t>,
    pub total: Var<'t>,
}

impl BatchLoss<'_> {
    pub fn components(&self) -> LossComponents {
        LossComponents {
            bce: self.bce.value().item(),
            hinge: self.hinge.value().item(),
            contrast: self.contrast.value().item(),
            total: self.total.value().item(),
        }
    }
}

pub fn clip_losses<'t>(
    p: &TapeParams<'t>,
    batch: &[ShadowClip],
    cfg: &PipelineConfig,
) -> Result<BatchLoss<'t>> {
    clip_losses_with_orders(p, batch, cfg, None)
}

/// Per-clip, per-frame Lovász sort orders of the current predictions.
pub fn hinge_orders(
    params: &ParamStore,
    batch: &[ShadowClip],
    cfg: &PipelineConfig,
) -> Result<Vec<Vec<Vec<usize>>>> {
    let tape = Tape::new();
    let p = params.on_tape(&tape, false);
    batch
        .iter()
        .map(|clip| {
            let out = forward(&p, &tape.constant(clip.frames.clone()), cfg)?;
            Ok(lovasz_orders(&out.logits.value(), &clip.masks)?)
        })
        .collect()
}

/// [`clip_losses`] with the hinge's sort orders optionally held fixed, which
/// makes the objective smooth around the current point.
pub fn clip_losses_with_orders<'t>(
    p: &TapeParams<'t>,
    batch: &[ShadowClip],
    cfg: &PipelineConfig,
    orders: Option<&[Vec<Vec<usize>>]>,
) -> Result<BatchLoss<'t>> {
    if batch.is_empty() {
        return Err(ModelError::Config("empty batch".into()));
    }
    let tape = p.tape;
    let mut bce = Vec::with_capacity(batch.len());
    let mut hinge = Vec::with_capacity(batch.len());
    let mut regions = Vec::new();
    for (i, clip) in batch.iter().enumerate() {
        let out = forward(p, &tape.constant(clip.frames.clone()), cfg)?;
        bce.push(bce_loss(&out.logits, &clip.masks)?);
        hinge.push(match orders {
            Some(o) => lovasz_hinge_with_orders(&out.logits, &clip.masks, &o[i])?,
            None => lovasz_hinge_loss(&out.logits, &clip.masks)?,
        });
        if cfg.contrast == ContrastVariant::Scotch {
            let feats = &out.encoded.scales[cfg.contrast_stage];
            let g = feats.geometry;
            let coarse = downsample_masks(&clip.masks, g.rows, g.cols)?;
            regions.extend(pool_region_features(
                feats,
                &coarse,
                i,
                cfg.contrast_normalize,
            )?);
        }
    }
    let mean = |v: &[Var<'t>]| -> Result<Var<'t>> {
        let stacked = Var::concat(
            &v.iter()
                .map(|x| x.reshape([1]))
                .collect::<std::result::Result<Vec<_>, _>>()?,
            0,
        )?;
        Ok(stacked.mean())
    };
    let bce = mean(&bce)?;
    let hinge = mean(&hinge)?;
    let contrast = match cfg.contrast {
        ContrastVariant::Scotch => scotch_from_features(tape, &regions, &cfg.contrast_config())?,
        ContrastVariant::None => tape.constant(Tensor::scalar(0.0)),
    };
    let total = final_loss(&bce, &hinge, &contrast, &cfg.weights)?;
    Ok(BatchLoss {
        bce,
        hinge,
        contrast,
        total,
    })
}

/// One optimizer step on the final loss of `batch`; returns the loss terms
/// measured before the update.
pub fn train_step(
    params: &mut ParamStore,
    opt: &mut AdamW,
    batch: &[ShadowClip],
    cfg: &PipelineConfig,
) -> Result<LossComponents> {
    let grads = {
        let tape = Tape::new();
        let p = params.on_tape(&tape, true);
        let loss = clip_losses(&p, batch, cfg)?;
        let comps = loss.components();
        comps.check(opt.step + 1)?;
        let g = tape.backward(&loss.total)?;
        let grads: BTreeMap<String, Tensor> = p
            .vars
            .iter()
            .map(|(name, v)| {
                let grad = g
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(v.shape()));
                (name.clone(), grad)
            })
            .collect();
        if grads.values().any(|g| !g.is_finite()) {
            return Err(ModelError::NonFinite {
                step: opt.step + 1,
                component: "gradient",
            });
        }
        (grads, comps)
    };
    opt.update(params, &grads.0)?;
    Ok(grads.1)
}

/// Mean loss terms of one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub losses: LossComponents,
}

/// Runs `train.epochs` epochs of shuffled mini-batches, calling `on_epoch`
/// after each.
pub fn fit(
    clips: &[ShadowClip],
    cfg: &PipelineConfig,
    train: &TrainConfig,
    params: &mut ParamStore,
    opt: &mut AdamW,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    if clips.is_empty() {
        return Err(ModelError::Config("no training clips".into()));
    }
    if train.batch_size == 0 {
        return Err(ModelError::Config("batch_size must be positive".into()));
    }
    for c in clips {
        if c.dims() != (cfg.t, cfg.h, cfg.w) {
            return Err(ModelError::Config(format!(
                "clip {} has dims {:?}, config expects ({}, {}, {})",
                c.clip_id,
                c.dims(),
                cfg.t,
                cfg.h,
                cfg.w
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut logs = Vec::with_capacity(train.epochs);
    let total_steps = (train.epochs * clips.len().div_ceil(train.batch_size)) as f64;
    let mut step = 0.0;
    for epoch in 0..train.epochs {
        let mut order: Vec<usize> = (0..clips.len()).collect();
        order.shuffle(&mut rng);
        let mut sum = LossComponents::default();
        let mut batches = 0;
        for chunk in order.chunks(train.batch_size) {
            let batch: Vec<ShadowClip> = chunk
                .iter()
                .map(|&i| {
                    if train.flip && rng.gen_bool(0.5) {
                        clips[i].flipped()
                    } else {
                        clips[i].clone()
                    }
                })
                .collect();
            if train.cosine {
                opt.lr = train.lr * 0.5 * (1.0 + (std::f64::consts::PI * step / total_steps).cos());
            }
            step += 1.0;
            let l = train_step(params, opt, &batch, cfg)?;
            sum.bce += l.bce;
            sum.hinge += l.hinge;
            sum.contrast += l.contrast;
            sum.total += l.total;
            batches += 1;
        }
        let n = batches as f64;
        let log = EpochLog {
            epoch: epoch + 1,
            losses: LossComponents {
                bce: sum.bce / n,
                hinge: sum.hinge / n,
                contrast: sum.contrast / n,
                total: sum.total / n,
            },
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}
