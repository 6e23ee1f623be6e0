//! Finite-difference verification of backward rules.
//!
//! Errors are norm-wise: `|g - fd| / (|fd| + 1e-8)` over a whole input
//! tensor, so coordinates whose true derivative is ~0 cannot blow up the
//! ratio on pure rounding noise.

mod suites;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::oracle;
use crate::tensor::{Result, Tensor};

pub use suites::{format_table, model_check_config, run_suite, Suite};

pub const TOLERANCE: f64 = 1e-6;
pub const EPS: f64 = 1e-5;

pub fn relative_error(analytic: &Tensor, fd: &Tensor) -> f64 {
    let diff: f64 = analytic
        .data()
        .iter()
        .zip(fd.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    diff / (fd.norm() + 1e-8)
}

/// One row of a gradient-check table.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub name: String,
    /// Worst input of this check and its error.
    pub worst_input: String,
    pub rel_err: f64,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.rel_err < TOLERANCE
    }
}

/// Deterministic weights used to reduce non-scalar outputs to a scalar.
fn probe_weights(shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9 ^ shape.iter().product::<usize>() as u64);
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, &mut rng)
}

fn reduce<'t>(out: Var<'t>) -> Result<Var<'t>> {
    if out.value().numel() == 1 {
        return Ok(out);
    }
    let w = out.tape().constant(probe_weights(&out.shape()));
    Ok(out.mul(&w)?.sum_all())
}

/// Pins a closure to the signature the checkers expect, so its lifetimes
/// are inferred as higher-ranked.
pub fn op<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    f
}

/// Evaluates `f` once without gradients.
fn eval_plain<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
    Ok(reduce(f(&tape, &vars)?)?.value().item())
}

/// Analytic gradients of `f` (reduced to a scalar if needed) with respect to
/// every input, with `sabotage` naming an op whose backward sign is flipped.
pub fn analytic<F>(f: &F, inputs: &[Tensor], sabotage: Option<&str>) -> Result<Vec<Tensor>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    if let Some(op) = sabotage {
        tape.inject_wrong_sign(op);
    }
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let loss = reduce(f(&tape, &vars)?)?;
    let grads = tape.backward(&loss)?;
    Ok(vars.iter().map(|v| grads.wrt(v).clone()).collect())
}

/// Norm-wise relative error per input between backward and central
/// differences.
pub fn check_all<F>(f: &F, inputs: &[Tensor], sabotage: Option<&str>) -> Result<Vec<f64>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let grads = analytic(f, inputs, sabotage)?;
    let mut errs = Vec::with_capacity(inputs.len());
    for (i, g) in grads.iter().enumerate() {
        let mut probe = inputs.to_vec();
        let mut failure = None;
        let fd = oracle::finite_difference_grad(
            |x| {
                probe[i] = x.clone();
                eval_plain(f, &probe).unwrap_or_else(|e| {
                    failure = Some(e);
                    f64::NAN
                })
            },
            &inputs[i],
            EPS,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        errs.push(relative_error(g, &fd?));
    }
    Ok(errs)
}

/// Runs [`check_all`] and folds the result into a table row.
pub fn check<F>(
    name: &str,
    input_names: &[&str],
    f: &F,
    inputs: &[Tensor],
    sabotage: Option<&str>,
) -> Result<CheckRow>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    Ok(worst_row(
        name,
        input_names,
        &check_all(f, inputs, sabotage)?,
    ))
}

/// Per-input directional check: for each input `i`, a direction `d` mixing
/// the analytic gradient's unit vector with a random unit vector, comparing
/// `<g_i, d>` with a central difference of `f` along `d` (other inputs
/// held). Scales to inputs far too large for coordinate-wise differences.
pub fn check_directional<F>(
    f: &F,
    inputs: &[Tensor],
    seed: u64,
    sabotage: Option<&str>,
) -> Result<Vec<f64>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let grads = analytic(f, inputs, sabotage)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut errs = Vec::with_capacity(inputs.len());
    for (i, g) in grads.iter().enumerate() {
        let r = Tensor::uniform(g.shape().to_vec(), -1.0, 1.0, &mut rng);
        let (gn, rn) = (g.norm(), r.norm());
        let dir = Tensor::from_fn(g.shape().to_vec(), |k| {
            let along = if gn > 0.0 { g.data()[k] / gn } else { 0.0 };
            along + 0.5 * r.data()[k] / rn
        });
        let a: f64 = g.data().iter().zip(dir.data()).map(|(x, y)| x * y).sum();
        let mut dirs: Vec<Tensor> = inputs
            .iter()
            .map(|x| Tensor::zeros(x.shape().to_vec()))
            .collect();
        dirs[i] = dir;
        let mut failure = None;
        let fd = oracle::directional_derivative(
            |x| {
                eval_plain(f, x).unwrap_or_else(|e| {
                    failure = Some(e);
                    f64::NAN
                })
            },
            inputs,
            &dirs,
            EPS,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        let fd = fd?;
        errs.push((a - fd).abs() / (fd.abs() + 1e-8));
    }
    Ok(errs)
}

fn worst_row(name: &str, input_names: &[&str], errs: &[f64]) -> CheckRow {
    let (worst, err) = errs.iter().enumerate().fold((0, 0.0f64), |acc, (i, &e)| {
        if e > acc.1 || e.is_nan() {
            (i, e)
        } else {
            acc
        }
    });
    CheckRow {
        name: name.to_string(),
        worst_input: input_names
            .get(worst)
            .map_or_else(|| format!("input{worst}"), |s| s.to_string()),
        rel_err: err,
    }
}
