use super::*;
use crate::attention::{soda_block, AttentionConfig};
use crate::data::{generate_clip, ShadowClip, SynthSpec};
use crate::oracle;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(attention: AttentionVariant) -> PipelineConfig {
    PipelineConfig {
        channels: [4, 8, 8, 8],
        decoder_width: 4,
        attention,
        seed: 7,
        ..Default::default()
    }
}

fn frames(cfg: &PipelineConfig, seed: u64) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform([cfg.t, cfg.h, cfg.w], 0.0, 1.0, &mut r)
}

fn features_of(params: &ParamStore, x: &Tensor, cfg: &PipelineConfig) -> Vec<Tensor> {
    let tape = Tape::new();
    let p = params.on_tape(&tape, false);
    let f = encode(&p, &tape.constant(x.clone()), cfg).unwrap();
    f.scales.iter().map(|s| (*s.data.value()).clone()).collect()
}

/// Rows of `x [t*m, c]` belonging to frame `f`.
fn frame_rows(x: &Tensor, t: usize, f: usize) -> Vec<f64> {
    let per = x.numel() / t;
    x.data()[f * per..(f + 1) * per].to_vec()
}

fn perturb_w_out(params: &mut ParamStore, seed: u64) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    for (name, t) in params.tensors.iter_mut() {
        if name.ends_with("w_out") {
            *t = Tensor::uniform(t.shape().to_vec(), -0.3, 0.3, &mut r);
        }
    }
}

#[test]
fn config_text_round_trips() {
    let cfg = PipelineConfig {
        attention: AttentionVariant::Soda,
        contrast: ContrastVariant::Scotch,
        tau: 0.07,
        scale: ScaleMode::SqrtN,
        contrast_stage: 1,
        seed: 99,
        ..Default::default()
    };
    assert_eq!(PipelineConfig::parse_text(&cfg.to_string()).unwrap(), cfg);
    let mut tc = TrainConfig::default();
    for line in "epochs=3\nlr=0.0005\nflip=false".lines() {
        let (k, v) = line.split_once('=').unwrap();
        assert!(tc.set(k, v).unwrap());
    }
    assert_eq!((tc.epochs, tc.lr, tc.flip), (3, 0.0005, false));
}

#[test]
fn config_rejects_bad_values() {
    assert!(PipelineConfig::parse_text("h=48").is_err());
    assert!(PipelineConfig::parse_text("nonsense=1").is_err());
    assert!(PipelineConfig::parse_text("channels=1,2,3").is_err());
    assert!(PipelineConfig::parse_text("heads=3").is_err());
    assert!(PipelineConfig::parse_text("attention=fancy").is_err());
    let cfg = PipelineConfig {
        w: 40,
        ..Default::default()
    };
    assert!(ParamStore::init(&cfg).is_err());
}

#[test]
fn parameter_sets_follow_variant() {
    let count = |v| {
        ParamStore::init(&small(v))
            .unwrap()
            .tensors
            .keys()
            .filter(|k| k.starts_with("attn."))
            .count()
    };
    assert_eq!(count(AttentionVariant::None), 0);
    assert_eq!(count(AttentionVariant::Joint), 16);
    assert_eq!(count(AttentionVariant::Soda), 28);
    assert_eq!(count(AttentionVariant::Trajectory), 28);
    let p = ParamStore::init(&small(AttentionVariant::Soda)).unwrap();
    assert!(p.tensors["attn.2.w_out"].data().iter().all(|&v| v == 0.0));
    assert!(p.tensors["dec.out.b"].data().iter().all(|&v| v == 0.0));
}

#[test]
fn encoder_has_no_temporal_leakage() {
    let cfg = small(AttentionVariant::None);
    let params = ParamStore::init(&cfg).unwrap();
    let x = frames(&cfg, 1);
    let mut y = x.clone();
    for v in &mut y.data_mut()[..cfg.h * cfg.w] {
        *v = 1.0 - *v;
    }
    let (a, b) = (
        features_of(&params, &x, &cfg),
        features_of(&params, &y, &cfg),
    );
    for (fa, fb) in a.iter().zip(&b) {
        assert_ne!(frame_rows(fa, cfg.t, 0), frame_rows(fb, cfg.t, 0));
        for f in 1..cfg.t {
            assert_eq!(frame_rows(fa, cfg.t, f), frame_rows(fb, cfg.t, f));
        }
    }
}

#[test]
fn identical_frames_give_identical_features() {
    let cfg = small(AttentionVariant::None);
    let params = ParamStore::init(&cfg).unwrap();
    let one = frames(&cfg, 2);
    let plane = &one.data()[..cfg.h * cfg.w];
    let x = Tensor::from_fn([cfg.t, cfg.h, cfg.w], |i| plane[i % plane.len()]);
    for s in features_of(&params, &x, &cfg) {
        for f in 1..cfg.t {
            assert_eq!(frame_rows(&s, cfg.t, f), frame_rows(&s, cfg.t, 0));
        }
    }
}

#[test]
fn init_and_forward_are_reproducible() {
    let cfg = small(AttentionVariant::Soda);
    let (a, b) = (
        ParamStore::init(&cfg).unwrap(),
        ParamStore::init(&cfg).unwrap(),
    );
    assert_eq!(a, b);
    let x = frames(&cfg, 3);
    let fa = features_of(&a, &x, &cfg);
    let fb = features_of(&b, &x, &cfg);
    assert_eq!(fa, fb);
    assert_eq!(
        predict(&a, &x, &cfg).unwrap(),
        predict(&b, &x, &cfg).unwrap()
    );
    let other = ParamStore::init(&PipelineConfig { seed: 8, ..cfg }).unwrap();
    assert_ne!(a, other);
}

#[test]
fn encoder_scales_have_configured_geometry() {
    let cfg = small(AttentionVariant::None);
    let params = ParamStore::init(&cfg).unwrap();
    let tape = Tape::new();
    let p = params.on_tape(&tape, false);
    let f = encode(&p, &tape.constant(frames(&cfg, 4)), &cfg).unwrap();
    for (i, s) in f.scales.iter().enumerate() {
        assert_eq!(s.geometry, cfg.geometry(i));
        assert_eq!(
            s.data.shape(),
            vec![cfg.t * (64 / STRIDES[i]).pow(2), cfg.channels[i]]
        );
    }
    let wrong = tape.constant(Tensor::zeros([cfg.t, 32, 32]));
    assert!(encode(&p, &wrong, &cfg).is_err());
}

#[test]
fn temporalize_identities() {
    for variant in [
        AttentionVariant::None,
        AttentionVariant::Soda,
        AttentionVariant::Joint,
        AttentionVariant::Trajectory,
    ] {
        let cfg = small(variant);
        let params = ParamStore::init(&cfg).unwrap();
        let tape = Tape::new();
        let p = params.on_tape(&tape, false);
        let f = encode(&p, &tape.constant(frames(&cfg, 5)), &cfg).unwrap();
        let g = temporalize(&p, &f, &cfg).unwrap();
        for (a, b) in f.scales.iter().zip(&g.scales) {
            assert_eq!(*a.data.value(), *b.data.value(), "{variant}");
        }
    }
}

#[test]
fn temporalize_applies_soda_per_scale() {
    let cfg = PipelineConfig {
        h: 96,
        w: 96,
        ..small(AttentionVariant::Soda)
    };
    let mut params = ParamStore::init(&cfg).unwrap();
    perturb_w_out(&mut params, 6);
    let tape = Tape::new();
    let p = params.on_tape(&tape, false);
    let f = encode(&p, &tape.constant(frames(&cfg, 6)), &cfg).unwrap();
    let g = temporalize(&p, &f, &cfg).unwrap();
    let acfg = cfg.attention_config();
    for i in 0..4 {
        let ap = AttentionParams::init(cfg.channels[i], 1, &mut ChaCha8Rng::seed_from_u64(0))
            .try_map(|name, _| params.get(&format!("attn.{i}.{name}")).cloned())
            .unwrap();
        let input = (*f.scales[i].data.value()).clone();
        let got = (*g.scales[i].data.value()).clone();
        let reference = {
            let t2 = Tape::new();
            let tokens = VideoTokens::new(cfg.geometry(i), t2.constant(input.clone())).unwrap();
            let stepwise = AttentionConfig {
                implementation: Implementation::Stepwise,
                ..acfg
            };
            (*soda_block(&tokens, &ap.on_tape(&t2, false), &stepwise)
                .unwrap()
                .data
                .value())
            .clone()
        };
        assert!(got.max_abs_diff(&reference) < 1e-12, "scale {i}");
        let geo = cfg.geometry(i);
        if geo.m() <= oracle::MAX_M && cfg.channels[i] <= oracle::MAX_C {
            let scale = acfg.scale.factor(cfg.channels[i], 1, geo.tokens());
            let want = oracle::block(
                oracle::Core::Soda,
                &input,
                geo.t,
                geo.m(),
                &ap,
                scale,
                acfg.norm_eps,
            )
            .unwrap();
            assert!(got.max_abs_diff(&want) < 1e-10, "scale {i} vs oracle");
        }
    }
}

#[test]
fn bilinear_matrix_matches_oracle() {
    let mut r = ChaCha8Rng::seed_from_u64(9);
    for (ih, iw, oh, ow) in [
        (2, 2, 16, 16),
        (4, 8, 16, 16),
        (16, 16, 64, 64),
        (3, 5, 7, 4),
        (1, 1, 4, 4),
    ] {
        let src = Tensor::uniform([ih * iw, 1], -1.0, 1.0, &mut r);
        let m = bilinear_matrix(ih, iw, oh, ow);
        let got = oracle::matmul(&m, &src);
        let want = oracle::bilinear(src.data(), ih, iw, oh, ow);
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Decoder evaluated channel by channel and pixel by pixel.
fn decode_oracle(params: &ParamStore, feats: &[Tensor], cfg: &PipelineConfig) -> Vec<f64> {
    let e = cfg.decoder_width;
    let base = cfg.geometry(0);
    let m0 = base.m();
    let mut out = Vec::new();
    for f in 0..cfg.t {
        // concatenated [m0][4e]
        let mut cat = vec![vec![0.0; 4 * e]; m0];
        for (i, x) in feats.iter().enumerate() {
            let g = cfg.geometry(i);
            let c = cfg.channels[i];
            let w = params.get(&format!("dec.{i}.w")).unwrap();
            let b = params.get(&format!("dec.{i}.b")).unwrap();
            for ch in 0..e {
                let plane: Vec<f64> = (0..g.m())
                    .map(|s| {
                        let row = (f * g.m() + s) * c;
                        b.data()[ch]
                            + (0..c)
                                .map(|k| x.data()[row + k] * w.get(&[k, ch]))
                                .sum::<f64>()
                    })
                    .collect();
                let up = oracle::bilinear(&plane, g.rows, g.cols, base.rows, base.cols);
                for s in 0..m0 {
                    cat[s][i * e + ch] = up[s];
                }
            }
        }
        let (fw, fb) = (
            params.get("dec.fuse.w").unwrap(),
            params.get("dec.fuse.b").unwrap(),
        );
        let (ow, ob) = (
            params.get("dec.out.w").unwrap(),
            params.get("dec.out.b").unwrap(),
        );
        let coarse: Vec<f64> = cat
            .iter()
            .map(|z| {
                let hidden: Vec<f64> = (0..e)
                    .map(|j| {
                        gelu(fb.data()[j] + (0..4 * e).map(|k| z[k] * fw.get(&[k, j])).sum::<f64>())
                    })
                    .collect();
                ob.data()[0] + (0..e).map(|j| hidden[j] * ow.get(&[j, 0])).sum::<f64>()
            })
            .collect();
        out.extend(oracle::bilinear(
            &coarse, base.rows, base.cols, cfg.h, cfg.w,
        ));
    }
    out
}

fn decode_tensors(params: &ParamStore, feats: &[Tensor], cfg: &PipelineConfig) -> Tensor {
    let tape = Tape::new();
    let p = params.on_tape(&tape, false);
    let scales = feats
        .iter()
        .enumerate()
        .map(|(i, x)| VideoTokens::new(cfg.geometry(i), tape.constant(x.clone())).unwrap())
        .collect();
    (*decode(&p, &MultiScaleFeatures { scales }, cfg)
        .unwrap()
        .value())
    .clone()
}

fn random_features(cfg: &PipelineConfig, seed: u64) -> Vec<Tensor> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..4)
        .map(|i| {
            Tensor::uniform(
                [cfg.geometry(i).tokens(), cfg.channels[i]],
                -1.0,
                1.0,
                &mut r,
            )
        })
        .collect()
}

#[test]
fn decoder_matches_per_pixel_oracle() {
    let cfg = small(AttentionVariant::None);
    let mut params = ParamStore::init(&cfg).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(10);
    for (name, t) in params.tensors.iter_mut() {
        if name.starts_with("dec.") && name.ends_with(".b") {
            *t = Tensor::uniform(t.shape().to_vec(), -0.5, 0.5, &mut r);
        }
    }
    let feats = random_features(&cfg, 11);
    let got = decode_tensors(&params, &feats, &cfg);
    assert_eq!(got.shape(), &[cfg.t, cfg.h, cfg.w]);
    let want = decode_oracle(&params, &feats, &cfg);
    let err = got
        .data()
        .iter()
        .zip(&want)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(err < 1e-10, "{err}");
}

#[test]
fn zero_features_decode_to_half() {
    let cfg = small(AttentionVariant::None);
    let params = ParamStore::init(&cfg).unwrap();
    let feats: Vec<Tensor> = (0..4)
        .map(|i| Tensor::zeros([cfg.geometry(i).tokens(), cfg.channels[i]]))
        .collect();
    let logits = decode_tensors(&params, &feats, &cfg);
    assert!(logits.data().iter().all(|&v| v == 0.0));
}

#[test]
fn constant_features_decode_to_constant_map() {
    let cfg = small(AttentionVariant::None);
    let params = ParamStore::init(&cfg).unwrap();
    let feats: Vec<Tensor> = (0..4)
        .map(|i| {
            let g = cfg.geometry(i);
            Tensor::from_fn([g.tokens(), cfg.channels[i]], |k| {
                0.1 * (k % cfg.channels[i]) as f64 - 0.2
            })
        })
        .collect();
    let logits = decode_tensors(&params, &feats, &cfg);
    let first = logits.data()[0];
    assert!(first != 0.0);
    assert!(logits.data().iter().all(|&v| (v - first).abs() < 1e-12));
}

#[test]
fn output_shape_contract() {
    for (h, w, t) in [(32, 32, 1), (64, 32, 2), (32, 96, 3)] {
        for variant in [
            AttentionVariant::None,
            AttentionVariant::Joint,
            AttentionVariant::Trajectory,
            AttentionVariant::Soda,
        ] {
            let cfg = PipelineConfig {
                h,
                w,
                t,
                ..small(variant)
            };
            let params = ParamStore::init(&cfg).unwrap();
            let y = predict(&params, &frames(&cfg, 12), &cfg).unwrap();
            assert_eq!(y.shape(), &[t, h, w]);
            assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

fn synthetic_batch(cfg: &PipelineConfig, n: usize, seed: u64) -> Vec<ShadowClip> {
    (0..n as u64)
        .map(|i| {
            let spec = SynthSpec {
                t: cfg.t,
                h: cfg.h,
                w: cfg.w,
                ..SynthSpec::desk(seed + i)
            };
            generate_clip(&spec, &format!("c{i}")).unwrap()
        })
        .collect()
}

#[test]
fn every_parameter_receives_gradient() {
    for (variant, contrast) in [
        (AttentionVariant::Soda, ContrastVariant::Scotch),
        (AttentionVariant::Joint, ContrastVariant::None),
        (AttentionVariant::Trajectory, ContrastVariant::Scotch),
    ] {
        let cfg = PipelineConfig {
            contrast,
            contrast_stage: 1,
            ..small(variant)
        };
        let mut params = ParamStore::init(&cfg).unwrap();
        perturb_w_out(&mut params, 13);
        let batch = synthetic_batch(&cfg, 2, 40);
        let tape = Tape::new();
        let p = params.on_tape(&tape, true);
        let loss = clip_losses(&p, &batch, &cfg).unwrap();
        if contrast == ContrastVariant::Scotch {
            assert!(loss.contrast.value().item() > 0.0);
        }
        let g = tape.backward(&loss.total).unwrap();
        for (name, v) in &p.vars {
            let grad = g.get(v).unwrap_or_else(|| panic!("{name} unreached"));
            assert!(
                grad.data().iter().any(|&x| x != 0.0),
                "{variant}: {name} has zero gradient"
            );
        }
    }
}

#[test]
fn contrast_none_reports_zero() {
    let cfg = PipelineConfig {
        weights: LossWeights {
            contrast: 0.0,
            ..Default::default()
        },
        ..small(AttentionVariant::None)
    };
    let mut params = ParamStore::init(&cfg).unwrap();
    let mut opt = AdamW::new(1e-3, 0.01);
    let l = train_step(&mut params, &mut opt, &synthetic_batch(&cfg, 1, 50), &cfg).unwrap();
    assert_eq!(l.contrast, 0.0);
    assert!((l.total - (l.bce + l.hinge)).abs() < 1e-12);
    assert!(train_step(&mut params, &mut opt, &[], &cfg).is_err());
}

fn total_on(params: &ParamStore, batch: &[ShadowClip], cfg: &PipelineConfig) -> f64 {
    let tape = Tape::new();
    let p = params.on_tape(&tape, false);
    clip_losses(&p, batch, cfg).unwrap().total.value().item()
}

#[test]
fn small_step_decreases_loss() {
    let cfg = PipelineConfig {
        contrast: ContrastVariant::Scotch,
        contrast_stage: 1,
        ..small(AttentionVariant::Soda)
    };
    let mut params = ParamStore::init(&cfg).unwrap();
    perturb_w_out(&mut params, 14);
    let batch = synthetic_batch(&cfg, 1, 60);
    let before = total_on(&params, &batch, &cfg);
    let mut ok = false;
    for lr in [1e-3, 1e-4, 1e-5] {
        let mut trial = params.clone();
        let mut opt = AdamW::new(lr, 0.0);
        let l = train_step(&mut trial, &mut opt, &batch, &cfg).unwrap();
        assert_eq!(l.total, before);
        if total_on(&trial, &batch, &cfg) < before {
            ok = true;
            break;
        }
    }
    assert!(ok, "no step size decreased the loss");
}

#[test]
fn training_is_bitwise_reproducible() {
    let cfg = PipelineConfig {
        contrast: ContrastVariant::Scotch,
        contrast_stage: 1,
        ..small(AttentionVariant::Soda)
    };
    let clips = synthetic_batch(&cfg, 3, 70);
    let train = TrainConfig {
        epochs: 2,
        batch_size: 2,
        seed: 3,
        ..Default::default()
    };
    let run = || {
        let mut params = ParamStore::init(&cfg).unwrap();
        let mut opt = AdamW::new(train.lr, train.weight_decay);
        let logs = fit(&clips, &cfg, &train, &mut params, &mut opt, |_| {}).unwrap();
        (logs, params)
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    assert_eq!(a.len(), 2);
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let cfg = small(AttentionVariant::Soda);
    let mut params = ParamStore::init(&cfg).unwrap();
    perturb_w_out(&mut params, 15);
    let bytes = encode_checkpoint(&cfg, &params);
    assert_eq!(&bytes[..4], CKPT_MAGIC);
    let (cfg2, params2) = decode_checkpoint(&bytes).unwrap();
    assert_eq!(cfg2, cfg);
    assert_eq!(params2, params);
    let x = frames(&cfg, 16);
    assert_eq!(
        predict(&params, &x, &cfg).unwrap(),
        predict(&params2, &x, &cfg2).unwrap()
    );

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &cfg, &params).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap().1, params);
}

#[test]
fn checkpoint_rejects_corruption() {
    let cfg = small(AttentionVariant::Joint);
    let params = ParamStore::init(&cfg).unwrap();
    let bytes = encode_checkpoint(&cfg, &params);
    assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(decode_checkpoint(&extra).is_err());
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(decode_checkpoint(&magic).is_err());
    let mut version = bytes.clone();
    version[4] = 9;
    assert!(decode_checkpoint(&version).is_err());
    let mut missing = params.clone();
    missing.tensors.remove("dec.out.b");
    assert!(decode_checkpoint(&encode_checkpoint(&cfg, &missing)).is_err());
    let other = small(AttentionVariant::Soda);
    assert!(decode_checkpoint(&encode_checkpoint(&other, &params)).is_err());
}
