//! The fixed gradient-check suites behind `vidshadow gradcheck`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check, check_directional, op, worst_row, CheckRow};
use crate::attention::{
    apply, deformation_projections, spatial_aggregation, temporal_attention, xavier,
    AttentionConfig, AttentionParams, AttentionVariant, DeformationField, Geometry, Implementation,
    VideoTokens,
};
use crate::autodiff::{Tape, Var};
use crate::contrastive::{pool_region_features, scotch_loss, ContrastBatch, ContrastVariant};
use crate::data::{generate_clip, SynthSpec};
use crate::losses::{bce_loss, final_loss, lovasz_hinge_with_orders, lovasz_orders, LossWeights};
use crate::model::{
    clip_losses_with_orders, hinge_orders, ModelError, ParamStore, PipelineConfig, TapeParams,
};
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Ops,
    Attention,
    Contrastive,
    Losses,
    Model,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::Ops,
        Suite::Attention,
        Suite::Contrastive,
        Suite::Losses,
        Suite::Model,
    ];
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Ops => "ops",
            Suite::Attention => "attention",
            Suite::Contrastive => "contrastive",
            Suite::Losses => "losses",
            Suite::Model => "model",
        })
    }
}

impl FromStr for Suite {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Suite::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| format!("unknown gradcheck module {s:?}"))
    }
}

/// Runs every check of `suite` on inputs drawn from `seed`.
pub fn run_suite(suite: Suite, seed: u64, sabotage: Option<&str>) -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match suite {
        Suite::Ops => ops(&mut rng, sabotage),
        Suite::Attention => attention(&mut rng, sabotage),
        Suite::Contrastive => contrastive(&mut rng, sabotage),
        Suite::Losses => losses(&mut rng, sabotage),
        Suite::Model => model(seed, sabotage),
    }
}

/// Fixed-width table, one line per check.
pub fn format_table(suite: Suite, rows: &[CheckRow]) -> String {
    let mut out = format!(
        "{:<12} {:<28} {:<18} {:>10}  status\n",
        "module", "check", "worst_input", "rel_err"
    );
    for r in rows {
        out += &format!(
            "{:<12} {:<28} {:<18} {:>10.3e}  {}\n",
            suite.to_string(),
            r.name,
            r.worst_input,
            r.rel_err,
            if r.passed() { "pass" } else { "FAIL" }
        );
    }
    out
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape.to_vec(), lo, hi, rng)
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn ops(r: &mut ChaCha8Rng, sabotage: Option<&str>) -> Result<Vec<CheckRow>> {
    let s = sabotage;
    let x34 = uniform(&[3, 4], -1.0, 1.0, r);
    let y34 = uniform(&[3, 4], -1.0, 1.0, r);
    let b4 = uniform(&[4], -1.0, 1.0, r);
    let x234 = uniform(&[2, 3, 4], -1.5, 1.5, r);
    let rows = vec![
        check(
            "add",
            &["a", "b"],
            &op(|_, v| v[0].add(&v[1])),
            &[x34.clone(), b4.clone()],
            s,
        )?,
        check(
            "sub",
            &["a", "b"],
            &op(|_, v| v[0].sub(&v[1])),
            &[x34.clone(), y34.clone()],
            s,
        )?,
        check(
            "mul",
            &["a", "b"],
            &op(|_, v| v[0].mul(&v[1])),
            &[x34.clone(), b4.clone()],
            s,
        )?,
        check(
            "scale",
            &["x"],
            &op(|_, v| Ok(v[0].scale(-1.7))),
            std::slice::from_ref(&x34),
            s,
        )?,
        check(
            "add_scalar",
            &["x"],
            &op(|_, v| v[0].add_scalar(0.3).mul(&v[0])),
            std::slice::from_ref(&x34),
            s,
        )?,
        check(
            "exp",
            &["x"],
            &op(|_, v| v[0].exp()),
            std::slice::from_ref(&x34),
            s,
        )?,
        check(
            "log",
            &["x"],
            &op(|_, v| v[0].log()),
            &[uniform(&[3, 4], 0.5, 2.0, r)],
            s,
        )?,
        check(
            "sigmoid",
            &["x"],
            &op(|_, v| Ok(v[0].sigmoid())),
            std::slice::from_ref(&x34),
            s,
        )?,
        check(
            "relu",
            &["x"],
            &op(|_, v| Ok(v[0].relu())),
            &[away_from_zero(&[3, 4], r)],
            s,
        )?,
        check(
            "softplus",
            &["x"],
            &op(|_, v| Ok(v[0].softplus())),
            std::slice::from_ref(&x234),
            s,
        )?,
        check(
            "gelu",
            &["x"],
            &op(|_, v| Ok(v[0].gelu())),
            std::slice::from_ref(&x234),
            s,
        )?,
        check(
            "sum_all",
            &["x"],
            &op(|_, v| Ok(v[0].mul(&v[0])?.sum_all())),
            std::slice::from_ref(&x34),
            s,
        )?,
        check(
            "mean",
            &["x"],
            &op(|_, v| Ok(v[0].mul(&v[0])?.mean())),
            std::slice::from_ref(&x34),
            s,
        )?,
        check(
            "sum",
            &["x"],
            &op(|_, v| v[0].sum(1)),
            std::slice::from_ref(&x234),
            s,
        )?,
        check(
            "reshape",
            &["x"],
            &op(|_, v| v[0].reshape([4, 3])),
            std::slice::from_ref(&x34),
            s,
        )?,
        check(
            "transpose",
            &["x"],
            &op(|_, v| v[0].transpose()),
            std::slice::from_ref(&x234),
            s,
        )?,
        check(
            "permute",
            &["x"],
            &op(|_, v| v[0].permute(&[2, 0, 1])),
            std::slice::from_ref(&x234),
            s,
        )?,
        check(
            "concat",
            &["a", "b"],
            &op(|_, v| Var::concat(&[v[0], v[1]], 1)),
            &[x34.clone(), uniform(&[3, 2], -1.0, 1.0, r)],
            s,
        )?,
        check(
            "slice",
            &["x"],
            &op(|_, v| v[0].slice(1, 1, 2)),
            std::slice::from_ref(&x34),
            s,
        )?,
        check(
            "gather",
            &["x"],
            &op(|_, v| v[0].gather(&[Some(2), None, Some(0), Some(2)])),
            std::slice::from_ref(&x34),
            s,
        )?,
        check(
            "softmax",
            &["x"],
            &op(|_, v| v[0].softmax(1)),
            std::slice::from_ref(&x234),
            s,
        )?,
        check(
            "logsumexp",
            &["x"],
            &op(|_, v| v[0].logsumexp()),
            std::slice::from_ref(&x234),
            s,
        )?,
        check(
            "layer_norm",
            &["x"],
            &op(|_, v| v[0].layer_norm(1e-5)),
            std::slice::from_ref(&x34),
            s,
        )?,
        check(
            "l2_normalize",
            &["x"],
            &op(|_, v| v[0].l2_normalize(1e-12)),
            std::slice::from_ref(&x34),
            s,
        )?,
        check(
            "matmul",
            &["a", "b"],
            &op(|_, v| v[0].matmul(&v[1])),
            &[x234.clone(), uniform(&[4, 5], -1.0, 1.0, r)],
            s,
        )?,
        check(
            "matmul_broadcast_lhs",
            &["a", "b"],
            &op(|_, v| v[0].matmul(&v[1])),
            &[
                uniform(&[5, 3], -1.0, 1.0, r),
                x234.clone().reshape([2, 3, 4])?,
            ],
            s,
        )?,
    ];
    let mut rows = rows;
    for (name, variant) in [
        ("soda_kernel", AttentionVariant::Soda),
        ("trajectory_kernel", AttentionVariant::Trajectory),
    ] {
        let g = Geometry::new(3, 2, 2);
        let (x, p) = block_case(g, 4, 2, r);
        rows.push(check(
            name,
            &BLOCK_INPUTS,
            &block_fn(variant, g, 2, AttentionConfig::default()),
            &block_inputs(&x, &p),
            s,
        )?);
    }
    Ok(rows)
}

const BLOCK_INPUTS: [&str; 8] = ["x", "w_q", "w_k", "w_v", "hat_q", "hat_k", "hat_v", "w_out"];

fn block_case(
    g: Geometry,
    c: usize,
    heads: usize,
    r: &mut ChaCha8Rng,
) -> (Tensor, AttentionParams) {
    let x = uniform(&[g.tokens(), c], -2.0, 2.0, r);
    let mut p = AttentionParams::init(c, heads, r);
    p.w_out = xavier(c, c, r);
    (x, p)
}

fn block_inputs(x: &Tensor, p: &AttentionParams) -> Vec<Tensor> {
    let mut v = vec![x.clone()];
    v.extend(p.named().iter().map(|(_, t)| (*t).clone()));
    v
}

fn params_from<'t>(v: &[Var<'t>], heads: usize) -> AttentionParams<Var<'t>> {
    AttentionParams {
        w_q: v[1],
        w_k: v[2],
        w_v: v[3],
        hat_q: v[4],
        hat_k: v[5],
        hat_v: v[6],
        w_out: v[7],
        heads,
    }
}

fn block_fn(
    variant: AttentionVariant,
    g: Geometry,
    heads: usize,
    cfg: AttentionConfig,
) -> impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>> {
    op(move |_, v| {
        Ok(apply(
            variant,
            &VideoTokens::new(g, v[0])?,
            &params_from(v, heads),
            &cfg,
        )?
        .data)
    })
}

fn attention(r: &mut ChaCha8Rng, s: Option<&str>) -> Result<Vec<CheckRow>> {
    let stepwise = AttentionConfig {
        implementation: Implementation::Stepwise,
        ..Default::default()
    };
    let g = Geometry::new(3, 2, 2);
    let mut rows = Vec::new();
    for (name, variant, cfg) in [
        (
            "soda_block",
            AttentionVariant::Soda,
            AttentionConfig::default(),
        ),
        ("soda_block_stepwise", AttentionVariant::Soda, stepwise),
        (
            "trajectory_attention",
            AttentionVariant::Trajectory,
            AttentionConfig::default(),
        ),
        (
            "trajectory_stepwise",
            AttentionVariant::Trajectory,
            stepwise,
        ),
    ] {
        let (x, p) = block_case(g, 4, 2, r);
        rows.push(check(
            name,
            &BLOCK_INPUTS,
            &block_fn(variant, g, 2, cfg),
            &block_inputs(&x, &p),
            s,
        )?);
    }
    let (x, p) = block_case(g, 4, 2, r);
    let joint_inputs = [
        x.clone(),
        p.w_q.clone(),
        p.w_k.clone(),
        p.w_v.clone(),
        p.w_out.clone(),
    ];
    let joint = op(move |tape, v| {
        let c = v[0].shape()[1];
        let fill = tape.constant(Tensor::eye(c));
        let ap = AttentionParams {
            w_q: v[1],
            w_k: v[2],
            w_v: v[3],
            hat_q: fill,
            hat_k: fill,
            hat_v: fill,
            w_out: v[4],
            heads: 2,
        };
        Ok(apply(
            AttentionVariant::Joint,
            &VideoTokens::new(g, v[0])?,
            &ap,
            &AttentionConfig::default(),
        )?
        .data)
    });
    rows.push(check(
        "joint_spacetime_attention",
        &["x", "w_q", "w_k", "w_v", "w_out"],
        &joint,
        &joint_inputs,
        s,
    )?);

    // the two SODA stages on their own
    let qkv: Vec<Tensor> = (0..3)
        .map(|_| uniform(&[g.tokens(), 4], -1.5, 1.5, r))
        .collect();
    let temporal = op(move |_, v| Ok(temporal_attention(&v[0], &v[1], &v[2], g, 2, 0.7)?.values));
    rows.push(check(
        "temporal_attention",
        &["q", "k", "v"],
        &temporal,
        &qkv,
        s,
    )?);
    let field = uniform(&[g.tokens(), g.m(), 4], -1.5, 1.5, r);
    let (_, p) = block_case(g, 4, 2, r);
    let stage2 = op(move |_, v| {
        let ap = params_from(v, 2);
        let (qh, kh, vh) = deformation_projections(
            &DeformationField {
                values: v[0],
                geometry: g,
            },
            &ap,
        )?;
        spatial_aggregation(&qh, &kh, &vh, 2, 0.7)
    });
    rows.push(check(
        "deformation_spatial_stage",
        &BLOCK_INPUTS,
        &stage2,
        &block_inputs(&field, &p),
        s,
    )?);
    Ok(rows)
}

fn contrastive(r: &mut ChaCha8Rng, s: Option<&str>) -> Result<Vec<CheckRow>> {
    let (q, p, n, c) = (3, 4, 5, 6);
    let inputs = [
        uniform(&[q, c], -1.0, 1.0, r),
        uniform(&[q, p, c], -1.0, 1.0, r),
        uniform(&[q, n, c], -1.0, 1.0, r),
    ];
    let direct = op(|_, v| {
        scotch_loss(&ContrastBatch {
            anchors: v[0],
            positives: v[1],
            negatives: v[2],
            tau: 0.1,
        })
    });
    let mut rows = vec![check(
        "scotch_loss",
        &["anchors", "positives", "negatives"],
        &direct,
        &inputs,
        s,
    )?];

    let g = Geometry::new(3, 2, 3);
    let masks = Tensor::from_fn([3, 2, 3], |i| ((i * 7 + 3) % 5 < 2) as u8 as f64);
    let features = uniform(&[g.tokens(), 4], -1.0, 1.0, r);
    for (name, normalize) in [
        ("scotch_pooled_normalized", true),
        ("scotch_pooled_raw", false),
    ] {
        let m = masks.clone();
        let f = op(move |tape, v| {
            let mut regions = pool_region_features(&VideoTokens::new(g, v[0])?, &m, 0, normalize)?;
            let scaled = v[0].scale(0.5).add_scalar(0.1);
            regions.extend(pool_region_features(
                &VideoTokens::new(g, scaled)?,
                &m,
                1,
                normalize,
            )?);
            crate::contrastive::scotch_from_features(
                tape,
                &regions,
                &crate::contrastive::ContrastConfig {
                    tau: 0.1,
                    normalize,
                },
            )
        });
        rows.push(check(
            name,
            &["features"],
            &f,
            std::slice::from_ref(&features),
            s,
        )?);
    }
    Ok(rows)
}

/// Logits whose hinge errors are pairwise separated and away from the kink,
/// so the Lovász sort order is stable under the finite-difference step.
fn sort_stable_logits(shape: &[usize], targets: &Tensor, r: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut errors: Vec<f64> = (0..n).map(|i| 0.2 + 0.15 * i as f64).collect();
    for i in (1..n).rev() {
        errors.swap(i, r.gen_range(0..=i));
    }
    Tensor::from_fn(shape.to_vec(), |i| {
        let sign = 2.0 * targets.data()[i] - 1.0;
        (1.0 - errors[i]) * sign
    })
}

fn losses(r: &mut ChaCha8Rng, s: Option<&str>) -> Result<Vec<CheckRow>> {
    let shape = [2, 3, 3];
    let targets = Tensor::from_fn(shape, |i| (r.gen_bool(0.5) || i == 0) as u8 as f64);
    let x = uniform(&shape, -2.0, 2.0, r);
    let t1 = targets.clone();
    let mut rows = vec![check(
        "bce",
        &["logits"],
        &op(move |_, v| bce_loss(&v[0], &t1)),
        &[x],
        s,
    )?];
    let logits = sort_stable_logits(&shape, &targets, r);
    let orders = lovasz_orders(&logits, &targets)?;
    let t2 = targets.clone();
    let hinge = op(move |_, v| lovasz_hinge_with_orders(&v[0], &t2, &orders));
    rows.push(check("lovasz_hinge", &["logits"], &hinge, &[logits], s)?);
    let parts: Vec<Tensor> = (0..3)
        .map(|_| Tensor::scalar(r.gen_range(0.1..3.0)))
        .collect();
    let total = op(|_, v| final_loss(&v[0], &v[1], &v[2], &LossWeights::default()));
    rows.push(check(
        "final_loss",
        &["bce", "hinge", "contrast"],
        &total,
        &parts,
        s,
    )?);
    Ok(rows)
}

fn model_err(e: ModelError) -> TensorError {
    match e {
        ModelError::Tensor(t) => t,
        other => TensorError::Invalid {
            op: "model",
            msg: other.to_string(),
        },
    }
}

/// Configuration of the end-to-end check: full 64x64 clips, four frames,
/// every stage of the pipeline, under 50k parameters.
pub fn model_check_config(seed: u64) -> PipelineConfig {
    PipelineConfig {
        channels: [8, 16, 16, 32],
        decoder_width: 8,
        attention: AttentionVariant::Soda,
        contrast: ContrastVariant::Scotch,
        contrast_stage: 1,
        seed,
        ..Default::default()
    }
}

fn model(seed: u64, s: Option<&str>) -> Result<Vec<CheckRow>> {
    let cfg = model_check_config(seed);
    let mut params = ParamStore::init(&cfg).map_err(model_err)?;
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (name, t) in params.tensors.iter_mut() {
        if name.ends_with("w_out") {
            *t = Tensor::uniform(t.shape().to_vec(), -0.3, 0.3, &mut r);
        }
    }
    let batch: Vec<_> = (0..2)
        .map(|i| {
            let spec = SynthSpec {
                t: cfg.t,
                h: cfg.h,
                w: cfg.w,
                ..SynthSpec::desk(seed.wrapping_mul(31).wrapping_add(i))
            };
            generate_clip(&spec, &format!("gc{i}")).map_err(|e| TensorError::Invalid {
                op: "model",
                msg: e.to_string(),
            })
        })
        .collect::<Result<_>>()?;
    let orders = hinge_orders(&params, &batch, &cfg).map_err(model_err)?;
    let names: Vec<String> = params.tensors.keys().cloned().collect();
    let inputs: Vec<Tensor> = params.tensors.values().cloned().collect();
    let f = {
        let names = names.clone();
        op(move |tape, v| {
            let p = TapeParams {
                tape,
                vars: names.iter().cloned().zip(v.iter().copied()).collect(),
            };
            Ok(clip_losses_with_orders(&p, &batch, &cfg, Some(&orders))
                .map_err(model_err)?
                .total)
        })
    };
    let errs = check_directional(&f, &inputs, seed, s)?;
    let mut rows = Vec::new();
    for (group, prefix) in [
        ("end_to_end/encoder", "enc."),
        ("end_to_end/attention", "attn."),
        ("end_to_end/decoder", "dec."),
    ] {
        let picked: Vec<(&str, f64)> = names
            .iter()
            .zip(&errs)
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(n, &e)| (n.as_str(), e))
            .collect();
        let labels: Vec<&str> = picked.iter().map(|p| p.0).collect();
        let values: Vec<f64> = picked.iter().map(|p| p.1).collect();
        rows.push(worst_row(group, &labels, &values));
    }
    Ok(rows)
}
