use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck;
use crate::oracle::{self, Core};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random params with a non-zero output projection so the branch is visible.
fn live_params(c: usize, heads: usize, r: &mut ChaCha8Rng) -> AttentionParams {
    let mut p = AttentionParams::init(c, heads, r);
    p.w_out = xavier(c, c, r);
    p
}

fn stepwise_cfg() -> AttentionConfig {
    AttentionConfig {
        implementation: Implementation::Stepwise,
        ..Default::default()
    }
}

fn run_block(
    variant: AttentionVariant,
    x: &Tensor,
    g: Geometry,
    p: &AttentionParams,
    cfg: &AttentionConfig,
) -> Result<Tensor> {
    let tape = Tape::new();
    let tokens = VideoTokens::new(g, tape.constant(x.clone()))?;
    let out = apply(variant, &tokens, &p.on_tape(&tape, false), cfg)?;
    Ok((*out.data.value()).clone())
}

fn oracle_block(
    core: Core,
    x: &Tensor,
    g: Geometry,
    p: &AttentionParams,
    cfg: &AttentionConfig,
) -> Tensor {
    let scale = cfg.scale.factor(x.shape()[1], p.heads, g.tokens());
    oracle::block(core, x, g.t, g.m(), p, scale, cfg.norm_eps).unwrap()
}

fn random_case(seed: u64) -> (Tensor, Geometry, AttentionParams) {
    let mut r = rng(seed);
    let t = r.gen_range(1..=4);
    let rows = r.gen_range(1..=3);
    let cols = r.gen_range(1..=3);
    let heads = if r.gen_bool(0.5) { 1 } else { 2 };
    let c = heads * r.gen_range(1..=4);
    let g = Geometry::new(t, rows, cols);
    let x = Tensor::uniform([g.tokens(), c], -2.0, 2.0, &mut r);
    (x, g, live_params(c, heads, &mut r))
}

#[test]
fn streaming_and_stepwise_agree_with_oracles() {
    for seed in 0..30 {
        let (x, g, p) = random_case(seed);
        for cfg in [AttentionConfig::default(), stepwise_cfg()] {
            for (variant, core) in [
                (AttentionVariant::Soda, Core::Soda),
                (AttentionVariant::Trajectory, Core::Trajectory),
                (AttentionVariant::Joint, Core::Joint),
            ] {
                let got = run_block(variant, &x, g, &p, &cfg).unwrap();
                let want = oracle_block(core, &x, g, &p, &cfg);
                let err = got.max_abs_diff(&want);
                assert!(err < 1e-10, "{variant} seed {seed} {g:?}: {err}");
            }
        }
    }
}

#[test]
fn sqrt_n_scale_matches_oracle() {
    let (x, g, p) = random_case(7);
    let cfg = AttentionConfig {
        scale: ScaleMode::SqrtN,
        ..Default::default()
    };
    let got = run_block(AttentionVariant::Soda, &x, g, &p, &cfg).unwrap();
    assert!(got.max_abs_diff(&oracle_block(Core::Soda, &x, g, &p, &cfg)) < 1e-10);
}

#[test]
fn chunk_size_does_not_change_results() {
    let (x, g, p) = random_case(3);
    let base = run_block(AttentionVariant::Soda, &x, g, &p, &stepwise_cfg()).unwrap();
    for chunk in [1, 2, 5, 1000] {
        let cfg = AttentionConfig {
            implementation: Implementation::Streaming { chunk },
            ..Default::default()
        };
        let got = run_block(AttentionVariant::Soda, &x, g, &p, &cfg).unwrap();
        assert!(got.max_abs_diff(&base) < 1e-10, "chunk {chunk}");
    }
}

#[test]
fn zero_output_projection_is_identity() {
    let mut r = rng(11);
    let g = Geometry::new(3, 2, 2);
    let x = Tensor::uniform([g.tokens(), 4], -1.0, 1.0, &mut r);
    let p = AttentionParams::init(4, 2, &mut r);
    for v in [
        AttentionVariant::None,
        AttentionVariant::Joint,
        AttentionVariant::Trajectory,
        AttentionVariant::Soda,
    ] {
        let out = run_block(v, &x, g, &p, &AttentionConfig::default()).unwrap();
        assert_eq!(out, x, "{v}");
    }
}

#[test]
fn single_frame_soda_is_spatial_attention() {
    for seed in 0..10 {
        let mut r = rng(100 + seed);
        let g = Geometry::new(1, 3, 3);
        let x = Tensor::uniform([9, 4], -2.0, 2.0, &mut r);
        let p = live_params(4, 1, &mut r);
        let cfg = AttentionConfig::default();
        let got = run_block(AttentionVariant::Soda, &x, g, &p, &cfg).unwrap();
        let scale = cfg.scale.factor(4, 1, 9);
        let want = oracle::soda_single_frame(&x, &p, scale, cfg.norm_eps).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-10);
    }
}

fn core_output(
    layout: Grouping,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    g: Geometry,
    p: &AttentionParams,
    scale: f64,
) -> Tensor {
    let tape = Tape::new();
    let (qv, kv, vv) = (
        tape.constant(q.clone()),
        tape.constant(k.clone()),
        tape.constant(v.clone()),
    );
    let pv = p.on_tape(&tape, false);
    let out = streaming_core(&qv, &kv, &vv, &pv, g.layout(layout), scale, 4).unwrap();
    (*out.value()).clone()
}

#[test]
fn single_location_trajectory_is_temporal_attention() {
    let mut r = rng(5);
    let g = Geometry::new(4, 1, 1);
    let [q, k, v] = [0; 3].map(|_| Tensor::uniform([4, 6], -2.0, 2.0, &mut r));
    let p = live_params(6, 2, &mut r);
    let got = core_output(Grouping::Trajectory, &q, &k, &v, g, &p, 0.7);
    let want = oracle::trajectory_single_location(&v, &p, 0.7).unwrap();
    assert!(got.max_abs_diff(&want) < 1e-10);
    let got = core_output(Grouping::Soda, &q, &k, &v, g, &p, 0.7);
    let want = oracle::soda_single_location(&q, &k, &v, &p, 0.7).unwrap();
    assert!(got.max_abs_diff(&want) < 1e-10);
}

#[test]
fn single_frame_trajectory_is_spatial_attention() {
    let mut r = rng(6);
    let g = Geometry::new(1, 2, 3);
    let [q, k, v] = [0; 3].map(|_| Tensor::uniform([6, 2], -2.0, 2.0, &mut r));
    let p = live_params(2, 1, &mut r);
    let got = core_output(Grouping::Trajectory, &q, &k, &v, g, &p, 0.9);
    let y = oracle::joint_core(&q, &k, &v, 1, 0.9).unwrap();
    let want = oracle::matmul(&y, &p.hat_v);
    assert!(got.max_abs_diff(&want) < 1e-10);
}

#[test]
fn temporal_attention_degenerate_cases() {
    let mut r = rng(8);
    let tape = Tape::new();
    // one frame: the field is v at every location
    let g = Geometry::new(1, 2, 2);
    let [q, k, v] = [0; 3].map(|_| tape.constant(Tensor::uniform([4, 3], -1.0, 1.0, &mut r)));
    let f = temporal_attention(&q, &k, &v, g, 1, 1.0).unwrap();
    let vals = f.values.value();
    for st in 0..4 {
        for s2 in 0..4 {
            for d in 0..3 {
                assert_eq!(vals.get(&[st, s2, d]), v.value().get(&[s2, d]));
            }
        }
    }
    // zero keys: uniform over time
    let g = Geometry::new(3, 1, 2);
    let q = tape.constant(Tensor::uniform([6, 2], -1.0, 1.0, &mut r));
    let k = tape.constant(Tensor::zeros([6, 2]));
    let v = tape.constant(Tensor::uniform([6, 2], -1.0, 1.0, &mut r));
    let f = temporal_attention(&q, &k, &v, g, 1, 1.0).unwrap();
    let (vals, vv) = (f.values.value(), v.value());
    for st in 0..6 {
        for s2 in 0..2 {
            for d in 0..2 {
                let mean = (0..3).map(|t| vv.get(&[t * 2 + s2, d])).sum::<f64>() / 3.0;
                assert!((vals.get(&[st, s2, d]) - mean).abs() < 1e-14);
            }
        }
    }
    // mismatched token count
    let q = tape.constant(Tensor::zeros([5, 2]));
    assert!(temporal_attention(&q, &q, &q, g, 1, 1.0).is_err());
}

#[test]
fn stepwise_stages_match_oracle() {
    let mut r = rng(9);
    let g = Geometry::new(3, 2, 2);
    let p = live_params(2, 1, &mut r);
    let [q, k, v] = [0; 3].map(|_| Tensor::uniform([12, 2], -2.0, 2.0, &mut r));
    let tape = Tape::new();
    let pv = p.on_tape(&tape, false);
    let [qv, kv, vv] = [&q, &k, &v].map(|x| tape.constant(x.clone()));
    let field = temporal_attention(&qv, &kv, &vv, g, 1, 0.5).unwrap();
    let (qh, kh, vh) = deformation_projections(&field, &pv).unwrap();
    let out = spatial_aggregation(&qh, &kh, &vh, 1, 0.5).unwrap();
    let want = oracle::soda_core(&q, &k, &v, 3, 4, &p, 0.5).unwrap();
    assert!(out.value().max_abs_diff(&want) < 1e-10);
}

#[test]
fn deformation_projections_identity_and_zero() {
    let mut r = rng(10);
    let g = Geometry::new(2, 1, 3);
    let tape = Tape::new();
    let field = Tensor::uniform([6, 3, 2], -1.0, 1.0, &mut r);
    let f = DeformationField {
        values: tape.constant(field.clone()),
        geometry: g,
    };
    let p = AttentionParams::identity(2).on_tape(&tape, false);
    let (qh, kh, _) = deformation_projections(&f, &p).unwrap();
    for st in 0..6 {
        for d in 0..2 {
            assert_eq!(qh.value().get(&[st, d]), field.get(&[st, st % 3, d]));
        }
    }
    assert_eq!(*kh.value(), field);
    let zero = DeformationField {
        values: tape.constant(Tensor::zeros([6, 3, 2])),
        geometry: g,
    };
    let rp = AttentionParams::init(2, 1, &mut r).on_tape(&tape, false);
    let (a, b, c) = deformation_projections(&zero, &rp).unwrap();
    for x in [a, b, c] {
        assert!(x.value().data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn spatial_aggregation_degenerate_cases() {
    let mut r = rng(12);
    let tape = Tape::new();
    let kh = tape.constant(Tensor::uniform([4, 1, 2], -1.0, 1.0, &mut r));
    let vh = tape.constant(Tensor::uniform([4, 1, 2], -1.0, 1.0, &mut r));
    let qh = tape.constant(Tensor::uniform([4, 2], -1.0, 1.0, &mut r));
    let out = spatial_aggregation(&qh, &kh, &vh, 1, 1.0).unwrap();
    assert_eq!(out.value().data(), vh.value().data());

    let kh = tape.constant(Tensor::uniform([2, 3, 2], -1.0, 1.0, &mut r));
    let vv = Tensor::uniform([2, 3, 2], -1.0, 1.0, &mut r);
    let vh = tape.constant(vv.clone());
    let qh = tape.constant(Tensor::zeros([2, 2]));
    let out = spatial_aggregation(&qh, &kh, &vh, 1, 1.0).unwrap().value();
    for i in 0..2 {
        for d in 0..2 {
            let mean = (0..3).map(|s| vv.get(&[i, s, d])).sum::<f64>() / 3.0;
            assert!((out.get(&[i, d]) - mean).abs() < 1e-14);
        }
    }
}

#[test]
fn constant_values_give_projected_constant() {
    // every value equal to u => output is u W^_v regardless of weights
    let mut r = rng(13);
    let g = Geometry::new(2, 2, 2);
    let p = live_params(3, 1, &mut r);
    let u = [0.3, -0.7, 1.1];
    let v = Tensor::from_fn([8, 3], |i| u[i % 3]);
    let q = Tensor::uniform([8, 3], -1.0, 1.0, &mut r);
    let k = Tensor::uniform([8, 3], -1.0, 1.0, &mut r);
    let out = core_output(Grouping::Soda, &q, &k, &v, g, &p, 1.0);
    let uw = oracle::matmul(&Tensor::new([1, 3], u.to_vec()).unwrap(), &p.hat_v);
    for i in 0..8 {
        for d in 0..3 {
            assert!((out.get(&[i, d]) - uw.data()[d]).abs() < 1e-12);
        }
    }
}

#[test]
fn joint_single_token() {
    let mut r = rng(14);
    let g = Geometry::new(1, 1, 1);
    let x = Tensor::uniform([1, 4], -1.0, 1.0, &mut r);
    let p = live_params(4, 2, &mut r);
    let cfg = AttentionConfig::default();
    let got = run_block(AttentionVariant::Joint, &x, g, &p, &cfg).unwrap();
    let z = oracle::layer_norm_rows(&x, cfg.norm_eps);
    let branch = oracle::matmul(&oracle::matmul(&z, &p.w_v), &p.w_out);
    let want = Tensor::from_fn([1, 4], |i| x.data()[i] + branch.data()[i]);
    assert!(got.max_abs_diff(&want) < 1e-14);
}

#[test]
fn bad_shapes_are_rejected() {
    let mut r = rng(15);
    let tape = Tape::new();
    let p = AttentionParams::init(4, 1, &mut r).on_tape(&tape, false);
    let x = tape.constant(Tensor::zeros([6, 4]));
    assert!(VideoTokens::new(Geometry::new(2, 2, 2), x).is_err());
    let tokens = VideoTokens::new(Geometry::new(2, 1, 3), x).unwrap();
    let mut bad = p;
    bad.heads = 3;
    assert!(soda_block(&tokens, &bad, &AttentionConfig::default()).is_err());
    let small = AttentionParams::init(2, 1, &mut r).on_tape(&tape, false);
    assert!(soda_block(&tokens, &small, &AttentionConfig::default()).is_err());
}

fn block_fn(
    variant: AttentionVariant,
    g: Geometry,
    heads: usize,
    cfg: AttentionConfig,
) -> impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>> {
    move |_, v: &[Var]| {
        let p = AttentionParams {
            w_q: v[1],
            w_k: v[2],
            w_v: v[3],
            hat_q: v[4],
            hat_k: v[5],
            hat_v: v[6],
            w_out: v[7],
            heads,
        };
        Ok(apply(variant, &VideoTokens::new(g, v[0])?, &p, &cfg)?.data)
    }
}

fn block_inputs(x: &Tensor, p: &AttentionParams) -> Vec<Tensor> {
    let mut v = vec![x.clone()];
    v.extend(p.named().iter().map(|(_, t)| (*t).clone()));
    v
}

#[test]
fn block_gradients_match_finite_differences() {
    for (seed, variant) in [
        (20, AttentionVariant::Soda),
        (21, AttentionVariant::Trajectory),
        (22, AttentionVariant::Joint),
    ] {
        let mut r = rng(seed);
        let g = Geometry::new(3, 2, 2);
        let x = Tensor::uniform([12, 4], -2.0, 2.0, &mut r);
        let p = live_params(4, 2, &mut r);
        for cfg in [AttentionConfig::default(), stepwise_cfg()] {
            let f = block_fn(variant, g, 2, cfg);
            let errs = gradcheck::check_all(&f, &block_inputs(&x, &p), None).unwrap();
            for (e, name) in errs
                .iter()
                .zip(std::iter::once(&"x").chain(PARAM_NAMES.iter()))
            {
                if variant == AttentionVariant::Joint && name.starts_with("hat") {
                    continue;
                }
                assert!(*e < 1e-6, "{variant} {name}: {e}");
            }
        }
    }
}

#[test]
fn streaming_gradients_equal_stepwise() {
    let (x, g, p) = random_case(31);
    let inputs = block_inputs(&x, &p);
    let a = gradcheck::analytic(
        &block_fn(
            AttentionVariant::Soda,
            g,
            p.heads,
            AttentionConfig::default(),
        ),
        &inputs,
        None,
    )
    .unwrap();
    let b = gradcheck::analytic(
        &block_fn(AttentionVariant::Soda, g, p.heads, stepwise_cfg()),
        &inputs,
        None,
    )
    .unwrap();
    for (a, b) in a.iter().zip(&b) {
        assert!(a.max_abs_diff(b) < 1e-10);
    }
}

#[test]
fn spatial_weights_are_a_simplex() {
    let (x, g, p) = random_case(40);
    let w = soda_spatial_weights(&x, g, &p, &AttentionConfig::default()).unwrap();
    let m = g.m();
    for row in w.data().chunks(m) {
        assert!(row.iter().all(|&v| v >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    // identical keys at the second stage: q^ = 0
    let mut zp = p.clone();
    zp.hat_q = Tensor::zeros(p.hat_q.shape().to_vec());
    let w = soda_spatial_weights(&x, g, &zp, &AttentionConfig::default()).unwrap();
    assert!(w.data().iter().all(|&v| (v - 1.0 / m as f64).abs() < 1e-14));
}

#[test]
fn mac_counts_follow_formula() {
    let mut r = rng(50);
    let (t, c) = (2, 4);
    for (rows, cols) in [(2, 2), (4, 4)] {
        let g = Geometry::new(t, rows, cols);
        let (n, m) = (g.tokens() as u64, g.m() as u64);
        let (t, c) = (t as u64, c as u64);
        let proj = 3 * n * c * c + n * c * c;
        let soda = measure_forward_macs(AttentionVariant::Soda, g, c as usize, 1, &mut r).unwrap();
        assert_eq!(soda, proj + n * (2 * t * m * c + 3 * c * c + 2 * m * c));
        let joint =
            measure_forward_macs(AttentionVariant::Joint, g, c as usize, 1, &mut r).unwrap();
        assert_eq!(joint, proj + 2 * n * n * c);
    }
}

fn permute_rows(x: &Tensor, g: Geometry, frame: &[usize], loc: &[usize]) -> Tensor {
    let c = x.shape()[1];
    let m = g.m();
    let mut out = Tensor::zeros(x.shape().to_vec());
    for t in 0..g.t {
        for s in 0..m {
            let src = frame[t] * m + loc[s];
            for d in 0..c {
                out.set(&[t * m + s, d], x.get(&[src, d]));
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn soda_block_is_time_equivariant(seed in any::<u64>(), perm in Just((0..4).collect::<Vec<usize>>()).prop_shuffle()) {
        let mut r = rng(seed);
        let g = Geometry::new(4, 2, 2);
        let x = Tensor::uniform([16, 4], -2.0, 2.0, &mut r);
        let p = live_params(4, 2, &mut r);
        let id: Vec<usize> = (0..4).collect();
        let cfg = AttentionConfig::default();
        let a = permute_rows(&run_block(AttentionVariant::Soda, &x, g, &p, &cfg).unwrap(), g, &perm, &id);
        let b = run_block(AttentionVariant::Soda, &permute_rows(&x, g, &perm, &id), g, &p, &cfg).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-10);
    }

    #[test]
    fn soda_block_is_space_equivariant(seed in any::<u64>(), perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle()) {
        let mut r = rng(seed);
        let g = Geometry::new(3, 2, 3);
        let x = Tensor::uniform([18, 4], -2.0, 2.0, &mut r);
        let p = live_params(4, 1, &mut r);
        let id: Vec<usize> = (0..3).collect();
        let cfg = AttentionConfig::default();
        let a = permute_rows(&run_block(AttentionVariant::Soda, &x, g, &p, &cfg).unwrap(), g, &id, &perm);
        let b = run_block(AttentionVariant::Soda, &permute_rows(&x, g, &id, &perm), g, &p, &cfg).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-10);
    }

    #[test]
    fn blocks_preserve_shape(t in 1usize..4, rows in 1usize..3, cols in 1usize..4, seed in any::<u64>()) {
        let mut r = rng(seed);
        let g = Geometry::new(t, rows, cols);
        let x = Tensor::uniform([g.tokens(), 2], -1.0, 1.0, &mut r);
        let p = live_params(2, 1, &mut r);
        for v in [AttentionVariant::Joint, AttentionVariant::Trajectory, AttentionVariant::Soda] {
            let out = run_block(v, &x, g, &p, &AttentionConfig::default()).unwrap();
            prop_assert_eq!(out.shape(), x.shape());
        }
    }

    #[test]
    fn field_rows_are_convex_combinations(seed in any::<u64>()) {
        let mut r = rng(seed);
        let g = Geometry::new(3, 1, 2);
        let tape = Tape::new();
        let [q, k, v] = [0; 3].map(|_| tape.constant(Tensor::uniform([6, 1], -2.0, 2.0, &mut r)));
        let f = temporal_attention(&q, &k, &v, g, 1, 1.0).unwrap();
        let (vals, vv) = (f.values.value(), v.value());
        for st in 0..6 {
            for s2 in 0..2 {
                let col: Vec<f64> = (0..3).map(|t| vv.get(&[t * 2 + s2, 0])).collect();
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let y = vals.get(&[st, s2, 0]);
                prop_assert!(y >= lo - 1e-12 && y <= hi + 1e-12);
            }
        }
    }
}
