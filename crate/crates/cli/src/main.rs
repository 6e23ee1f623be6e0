mod record;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::anyhow;
use clap::{Args, Parser, Subcommand};

use vidshadow::attention::{self, AttentionParams, AttentionVariant, Geometry, VideoTokens};
use vidshadow::contrastive::ContrastVariant;
use vidshadow::data::{self, DataError, PgmScale, ShadowClip};
use vidshadow::gradcheck::{self, Suite};
use vidshadow::metrics::{Averaging, Evaluator, DEFAULT_BETA2, DEFAULT_THRESHOLD};
use vidshadow::model::{self, AdamW, ModelError, ParamStore, PipelineConfig, TrainConfig};
use vidshadow::{Tape, Tensor};

use record::{epoch_line, RunRecord};

#[derive(Parser)]
#[command(
    name = "vidshadow",
    version,
    about = "Video shadow detection at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the clips of a manifest into VSSB files.
    GenData {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes a checkpoint and a `<out>.run` record.
    Train(TrainArgs),
    /// Micro-averaged metrics of a checkpoint over a directory of clips.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required_unless_present = "constant_pred")]
        ckpt: Option<PathBuf>,
        /// Predict 0.5 everywhere instead of running a model.
        #[arg(long)]
        constant_pred: bool,
    },
    /// Finite-difference checks of backward passes.
    Gradcheck {
        #[arg(long, default_value = "all")]
        module: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_wrong_sign: Option<String>,
    },
    /// Export spatial deformation-attention maps as PGM heatmaps.
    AttnDump {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        clip: PathBuf,
        #[arg(long, default_value_t = 1)]
        scale: usize,
        /// `center` (shadow-mask centroid per frame) or `ROW,COL` on the scale's grid.
        #[arg(long, default_value = "center")]
        query: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Wall time and MAC counts of attention variants.
    Bench {
        /// A variant name or `all`.
        #[arg(long, default_value = "all")]
        attention: String,
        #[arg(long, default_value_t = 4)]
        t: usize,
        #[arg(long, default_value_t = 64)]
        m: usize,
        #[arg(long, default_value_t = 32)]
        c: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 1)]
        heads: usize,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `key=value` file; flags given on the command line take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// none | joint | trajectory | soda
    #[arg(long)]
    attention: Option<AttentionVariant>,
    /// none | scotch
    #[arg(long)]
    contrast: Option<ContrastVariant>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Four comma-separated stage widths.
    #[arg(long)]
    channels: Option<String>,
    #[arg(long)]
    contrast_stage: Option<usize>,
    #[arg(long)]
    no_flip: bool,
    /// Clips for the final report (defaults to the training clips).
    #[arg(long)]
    eval_data: Option<PathBuf>,
}

enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
    Numeric(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Failure::Data(e.into())
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::NonFinite { .. } | ModelError::Tensor(_) => Failure::Numeric(e.into()),
            _ => Failure::Data(e.into()),
        }
    }
}

impl From<vidshadow::TensorError> for Failure {
    fn from(e: vidshadow::TensorError) -> Self {
        Failure::Numeric(e.into())
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(anyhow!(msg.into()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let res = match cli.cmd {
        Cmd::GenData { manifest, out } => gen_data(&manifest, &out),
        Cmd::Train(args) => train(&args),
        Cmd::Eval {
            data,
            ckpt,
            constant_pred,
        } => eval(&data, ckpt.as_deref(), constant_pred),
        Cmd::Gradcheck {
            module,
            seed,
            inject_wrong_sign,
        } => run_gradcheck(&module, seed, inject_wrong_sign.as_deref()),
        Cmd::AttnDump {
            ckpt,
            clip,
            scale,
            query,
            out,
        } => attn_dump(&ckpt, &clip, scale, &query, &out),
        Cmd::Bench {
            attention,
            t,
            m,
            c,
            reps,
            heads,
        } => bench(&attention, t, m, c, reps, heads),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Usage(e) | Failure::Data(e) | Failure::Numeric(e)) = &f;
            eprintln!("error: {e}");
            ExitCode::from(f.code())
        }
    }
}

fn gen_data(manifest: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(manifest).map_err(|e| DataError::io(manifest, e))?;
    let entries = data::parse_manifest(&text)?;
    fs::create_dir_all(out).map_err(|e| DataError::io(out, e))?;
    for entry in &entries {
        let clip = data::generate_clip(&entry.spec, &entry.clip_id)?;
        let path = out.join(format!("{}.vssb", entry.clip_id));
        data::write_clip(&clip, &path)?;
        println!(
            "wrote={} t={} h={} w={}",
            path.display(),
            entry.spec.t,
            entry.spec.h,
            entry.spec.w
        );
    }
    println!("clips={}", entries.len());
    Ok(())
}

fn load_clips(dir: &Path) -> Result<Vec<ShadowClip>> {
    let clips = data::load_dir(dir)?;
    if clips.is_empty() {
        return Err(Failure::Data(anyhow!("{}: no .vssb clips", dir.display())));
    }
    Ok(clips)
}

fn check_dims(clips: &[ShadowClip], cfg: &PipelineConfig) -> Result<()> {
    for c in clips {
        if c.dims() != (cfg.t, cfg.h, cfg.w) {
            return Err(Failure::Data(anyhow!(
                "clip {} is {:?} (t, h, w) but the model expects ({}, {}, {})",
                c.clip_id,
                c.dims(),
                cfg.t,
                cfg.h,
                cfg.w
            )));
        }
    }
    Ok(())
}

/// Effective configuration: built-in defaults, then the config file, then
/// flags; clip dimensions come from the data unless the file pins them.
fn resolve_config(
    args: &TrainArgs,
    dims: (usize, usize, usize),
) -> Result<(PipelineConfig, TrainConfig)> {
    let mut pipe = PipelineConfig::default();
    let mut train = TrainConfig::default();
    let mut pinned = Vec::new();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                usage(format!("{}:{}: expected key=value", path.display(), n + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            let known = pipe.set(k, v).map_err(|e| usage(e.to_string()))?
                || train.set(k, v).map_err(|e| usage(e.to_string()))?;
            if !known {
                return Err(usage(format!(
                    "{}:{}: unknown key {k:?}",
                    path.display(),
                    n + 1
                )));
            }
            if matches!(k, "t" | "h" | "w") {
                pinned.push(k.to_string());
            }
        }
    }
    let (t, h, w) = dims;
    for (key, slot, have) in [
        ("t", &mut pipe.t, t),
        ("h", &mut pipe.h, h),
        ("w", &mut pipe.w, w),
    ] {
        if pinned.iter().any(|p| p == key) && *slot != have {
            return Err(Failure::Data(anyhow!(
                "config sets {key}={} but the data has {key}={have}",
                *slot
            )));
        }
        *slot = have;
    }
    if let Some(a) = args.attention {
        pipe.attention = a;
    }
    if let Some(c) = args.contrast {
        pipe.contrast = c;
    }
    if let Some(s) = args.seed {
        pipe.seed = s;
        train.seed = s;
    }
    if let Some(c) = &args.channels {
        pipe.set("channels", c).map_err(|e| usage(e.to_string()))?;
    }
    if let Some(s) = args.contrast_stage {
        pipe.contrast_stage = s;
    }
    if let Some(e) = args.epochs {
        train.epochs = e;
    }
    if let Some(b) = args.batch_size {
        train.batch_size = b;
    }
    if let Some(lr) = args.lr {
        train.lr = lr;
    }
    if args.no_flip {
        train.flip = false;
    }
    pipe.validate().map_err(|e| usage(e.to_string()))?;
    if train.batch_size == 0 {
        return Err(usage("batch_size must be positive"));
    }
    Ok((pipe, train))
}

fn evaluate(
    clips: &[ShadowClip],
    predict: impl Fn(&ShadowClip) -> Result<Tensor>,
) -> Result<vidshadow::metrics::MetricReport> {
    let mut ev = Evaluator::new(DEFAULT_THRESHOLD, DEFAULT_BETA2, Averaging::Micro);
    for c in clips {
        ev.add(&predict(c)?, &c.masks)?;
    }
    Ok(ev.report())
}

fn train(args: &TrainArgs) -> Result<()> {
    let start = Instant::now();
    let clips = load_clips(&args.data)?;
    let (pipe, tc) = resolve_config(args, clips[0].dims())?;
    check_dims(&clips, &pipe)?;
    let eval_clips = match &args.eval_data {
        Some(dir) => load_clips(dir)?,
        None => clips.clone(),
    };
    check_dims(&eval_clips, &pipe)?;
    let mut params = ParamStore::init(&pipe)?;
    println!(
        "clips={} params={} attention={} contrast={} epochs={} seed={}",
        clips.len(),
        params.count(),
        pipe.attention,
        pipe.contrast,
        tc.epochs,
        pipe.seed
    );
    let mut opt = AdamW::new(tc.lr, tc.weight_decay);
    let logs = model::fit(&clips, &pipe, &tc, &mut params, &mut opt, |e| {
        println!("{}", epoch_line(e))
    })?;
    model::save_checkpoint(&args.out, &pipe, &params)?;
    let report = evaluate(&eval_clips, |c| {
        Ok(model::predict(&params, &c.frames, &pipe)?)
    })?;
    println!("{report}");
    let rec = RunRecord {
        seed: pipe.seed,
        pipeline: pipe,
        train: tc,
        epochs: logs,
        report: Some(report),
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    let mut sidecar = args.out.clone().into_os_string();
    sidecar.push(".run");
    let sidecar = PathBuf::from(sidecar);
    fs::write(&sidecar, rec.to_string()).map_err(|e| DataError::io(&sidecar, e))?;
    println!(
        "checkpoint={} record={}",
        args.out.display(),
        sidecar.display()
    );
    Ok(())
}

fn eval(dir: &Path, ckpt: Option<&Path>, constant: bool) -> Result<()> {
    let clips = load_clips(dir)?;
    let report = if constant {
        evaluate(&clips, |c| Ok(Tensor::full(c.masks.shape().to_vec(), 0.5)))?
    } else {
        let path = ckpt.ok_or_else(|| usage("--ckpt is required"))?;
        let (cfg, params) = model::load_checkpoint(path)?;
        check_dims(&clips, &cfg)?;
        evaluate(&clips, |c| Ok(model::predict(&params, &c.frames, &cfg)?))?
    };
    println!("{report}");
    Ok(())
}

fn run_gradcheck(module: &str, seed: u64, sabotage: Option<&str>) -> Result<()> {
    let suites: Vec<Suite> = if module == "all" {
        Suite::ALL.to_vec()
    } else {
        vec![module.parse().map_err(|e: String| usage(e))?]
    };
    let mut worst: Option<(Suite, gradcheck::CheckRow)> = None;
    for suite in suites {
        let rows = gradcheck::run_suite(suite, seed, sabotage)?;
        print!("{}", gradcheck::format_table(suite, &rows));
        for r in rows {
            if !r.passed()
                && worst
                    .as_ref()
                    .is_none_or(|(_, w)| r.rel_err > w.rel_err || r.rel_err.is_nan())
            {
                worst = Some((suite, r));
            }
        }
    }
    match worst {
        None => {
            println!("result=pass");
            Ok(())
        }
        Some((suite, r)) => Err(Failure::Numeric(anyhow!(
            "gradient check failed: worst {suite}/{} input={} rel_err={:.3e}",
            r.name,
            r.worst_input,
            r.rel_err
        ))),
    }
}

/// Query cell of frame `f`: the shadow-mask centroid mapped onto the grid,
/// or the grid center when the frame has no shadow.
fn centroid_cell(masks: &Tensor, f: usize, g: Geometry) -> (usize, usize) {
    let (h, w) = (masks.shape()[1], masks.shape()[2]);
    let (mut sy, mut sx, mut n) = (0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            if masks.get(&[f, y, x]) == 1.0 {
                sy += y as f64 + 0.5;
                sx += x as f64 + 0.5;
                n += 1.0;
            }
        }
    }
    if n == 0.0 {
        return (g.rows / 2, g.cols / 2);
    }
    let row = ((sy / n) * g.rows as f64 / h as f64) as usize;
    let col = ((sx / n) * g.cols as f64 / w as f64) as usize;
    (row.min(g.rows - 1), col.min(g.cols - 1))
}

fn attn_dump(ckpt: &Path, clip_path: &Path, scale: usize, query: &str, out: &Path) -> Result<()> {
    let (cfg, params) = model::load_checkpoint(ckpt)?;
    if cfg.attention != AttentionVariant::Soda {
        return Err(Failure::Data(anyhow!(
            "attention variant {} has no spatial deformation weights; attn-dump needs a soda checkpoint",
            cfg.attention
        )));
    }
    if scale >= model::STRIDES.len() {
        return Err(usage(format!(
            "scale {scale} out of range 0..{}",
            model::STRIDES.len()
        )));
    }
    let clip = data::read_clip(clip_path)?;
    check_dims(std::slice::from_ref(&clip), &cfg)?;
    let g = cfg.geometry(scale);
    let fixed = if query == "center" {
        None
    } else {
        let (r, c) = query
            .split_once(',')
            .and_then(|(r, c)| {
                Some((
                    r.trim().parse::<usize>().ok()?,
                    c.trim().parse::<usize>().ok()?,
                ))
            })
            .ok_or_else(|| {
                usage(format!(
                    "--query must be `center` or ROW,COL, got {query:?}"
                ))
            })?;
        if r >= g.rows || c >= g.cols {
            return Err(usage(format!(
                "query {r},{c} outside the {}x{} grid",
                g.rows, g.cols
            )));
        }
        Some((r, c))
    };
    let tokens = {
        let tape = Tape::new();
        let p = params.on_tape(&tape, false);
        let feats = model::encode(&p, &tape.constant(clip.frames.clone()), &cfg)?;
        let v = feats.scales[scale].data.value();
        (*v).clone()
    };
    let ap = AttentionParams::identity(cfg.channels[scale])
        .try_map(|name, _| params.get(&format!("attn.{scale}.{name}")).cloned())?;
    let ap = AttentionParams {
        heads: cfg.heads,
        ..ap
    };
    let weights = attention::soda_spatial_weights(&tokens, g, &ap, &cfg.attention_config())?;
    let (m, n) = (g.m(), g.tokens());
    let mut maps = Tensor::zeros([g.t, g.rows, g.cols]);
    for f in 0..g.t {
        let (r, c) = fixed.unwrap_or_else(|| centroid_cell(&clip.masks, f, g));
        let q = f * m + r * g.cols + c;
        for s in 0..m {
            let mean = (0..cfg.heads)
                .map(|h| weights.data()[(h * n + q) * m + s])
                .sum::<f64>()
                / cfg.heads as f64;
            maps.data_mut()[f * m + s] = mean;
        }
        let row = &maps.data()[f * m..(f + 1) * m];
        let sum: f64 = row.iter().sum();
        let peak = row.iter().cloned().fold(0.0, f64::max);
        if (sum - 1.0).abs() > 1e-10 {
            return Err(Failure::Numeric(anyhow!(
                "frame {f}: attention weights sum to {sum}, not 1"
            )));
        }
        println!("frame={f} query={r},{c} sum={sum} max={peak}");
    }
    fs::create_dir_all(out).map_err(|e| DataError::io(out, e))?;
    let paths = data::export_pgm(
        &maps,
        PgmScale::Fixed { lo: 0.0, hi: 1.0 },
        out,
        &format!("attn_s{scale}"),
    )?;
    println!("maps={} grid={}x{}", paths.len(), g.rows, g.cols);
    Ok(())
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let i = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[i]
}

fn bench(which: &str, t: usize, m: usize, c: usize, reps: usize, heads: usize) -> Result<()> {
    if t == 0 || m == 0 || c == 0 || reps == 0 || heads == 0 || !c.is_multiple_of(heads) {
        return Err(usage(
            "t, m, c, reps and heads must be positive, heads dividing c",
        ));
    }
    let variants: Vec<AttentionVariant> = if which == "all" {
        vec![
            AttentionVariant::Joint,
            AttentionVariant::Trajectory,
            AttentionVariant::Soda,
        ]
    } else {
        vec![which.parse().map_err(|e: String| usage(e))?]
    };
    let g = Geometry::new(t, 1, m);
    let mut rng = data::stream_rng(0, 0);
    println!(
        "{:<11} {:>3} {:>5} {:>4} {:>5} {:>12} {:>12} {:>14}",
        "variant", "t", "m", "c", "reps", "median_ms", "p90_ms", "macs"
    );
    for v in variants {
        let macs = attention::measure_forward_macs(v, g, c, heads, &mut rng)?;
        let params = AttentionParams::init(c, heads, &mut rng);
        let x = Tensor::uniform([g.tokens(), c], -1.0, 1.0, &mut rng);
        let mut times = Vec::with_capacity(reps);
        for _ in 0..reps {
            let tape = Tape::new();
            let tokens = VideoTokens::new(g, tape.constant(x.clone()))?;
            let p = params.on_tape(&tape, false);
            let t0 = Instant::now();
            attention::apply(v, &tokens, &p, &Default::default())?;
            times.push(t0.elapsed().as_secs_f64() * 1e3);
        }
        times.sort_by(f64::total_cmp);
        println!(
            "{:<11} {:>3} {:>5} {:>4} {:>5} {:>12.3} {:>12.3} {:>14}",
            v.to_string(),
            t,
            m,
            c,
            reps,
            percentile(&times, 0.5),
            percentile(&times, 0.9),
            macs
        );
    }
    Ok(())
}
