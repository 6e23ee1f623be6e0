//! Shadow detection metrics: MAE, F-beta, IoU and balanced error rates.

use std::fmt;
use std::str::FromStr;

use crate::tensor::{Result, Tensor, TensorError};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_BETA2: f64 = 0.3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }
}

fn check_pair(op: &'static str, pred: &Tensor, gt: &Tensor) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: pred.shape().to_vec(),
            rhs: gt.shape().to_vec(),
        });
    }
    Ok(())
}

/// Binarizes `pred` at `threshold` (`>=` is shadow) and counts against `gt`.
pub fn confusion(pred: &Tensor, gt: &Tensor, threshold: f64) -> Result<ConfusionCounts> {
    check_pair("confusion", pred, gt)?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p >= threshold, g >= 0.5) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub mae: f64,
    pub f_beta: f64,
    pub iou: f64,
    pub ber: f64,
    pub s_ber: f64,
    pub n_ber: f64,
}

/// `num / den`, or `empty` for `0/0`.
fn ratio(num: u64, den: u64, empty: f64) -> f64 {
    if den == 0 {
        empty
    } else {
        num as f64 / den as f64
    }
}

impl MetricReport {
    /// Each ratio is formed from integer counts and divided once, so the
    /// result is the correctly rounded value of the exact fraction.
    pub fn from_counts(c: &ConfusionCounts, mae: f64, beta2: f64) -> Self {
        let (tp, fp, tn, fn_) = (c.tp, c.fp, c.tn, c.fn_);
        // F = (1+b2) P R / (b2 P + R); with P or R at 0/0 = 1 the count form
        // below no longer applies, so fall back to the ratio form.
        let f_beta = if tp + fp > 0 && tp + fn_ > 0 {
            let num = (1.0 + beta2) * tp as f64;
            let den = num + beta2 * fn_ as f64 + fp as f64;
            if den == 0.0 {
                0.0
            } else {
                num / den
            }
        } else {
            let precision = ratio(tp, tp + fp, 1.0);
            let recall = ratio(tp, tp + fn_, 1.0);
            let den = beta2 * precision + recall;
            if den == 0.0 {
                0.0
            } else {
                (1.0 + beta2) * precision * recall / den
            }
        };
        let s_ber = ratio(100 * fn_, tp + fn_, 0.0);
        let n_ber = ratio(100 * fp, tn + fp, 0.0);
        let ber = match (tp + fn_, tn + fp) {
            (0, _) | (_, 0) => (s_ber + n_ber) / 2.0,
            (pos, neg) => {
                let num = 50 * (fn_ as u128 * neg as u128 + fp as u128 * pos as u128);
                num as f64 / (pos as u128 * neg as u128) as f64
            }
        };
        MetricReport {
            mae,
            f_beta,
            iou: ratio(tp, tp + fp + fn_, 1.0),
            ber,
            s_ber,
            n_ber,
        }
    }

    fn fields(&self) -> [(&'static str, f64); 6] {
        [
            ("mae", self.mae),
            ("fbeta", self.f_beta),
            ("iou", self.iou),
            ("ber", self.ber),
            ("sber", self.s_ber),
            ("nber", self.n_ber),
        ]
    }
}

/// Single-line `key=value` record; floats print in shortest round-trip form.
impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .fields()
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect();
        f.write_str(&parts.join(" "))
    }
}

impl FromStr for MetricReport {
    type Err = String;
    fn from_str(line: &str) -> std::result::Result<Self, String> {
        let mut vals = [None; 6];
        let keys = ["mae", "fbeta", "iou", "ber", "sber", "nber"];
        for tok in line.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| format!("bad field {tok:?}"))?;
            let i = keys
                .iter()
                .position(|&key| key == k)
                .ok_or_else(|| format!("unknown key {k:?}"))?;
            vals[i] = Some(v.parse::<f64>().map_err(|e| format!("{k}: {e}"))?);
        }
        let get = |i: usize| vals[i].ok_or_else(|| format!("missing {}", keys[i]));
        Ok(MetricReport {
            mae: get(0)?,
            f_beta: get(1)?,
            iou: get(2)?,
            ber: get(3)?,
            s_ber: get(4)?,
            n_ber: get(5)?,
        })
    }
}

pub fn mean_abs_error(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_pair("mae", pred, gt)?;
    let s: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(p, g)| (p - g).abs())
        .sum();
    Ok(s / pred.numel() as f64)
}

pub fn compute_report(
    pred: &Tensor,
    gt: &Tensor,
    threshold: f64,
    beta2: f64,
) -> Result<MetricReport> {
    let counts = confusion(pred, gt, threshold)?;
    Ok(MetricReport::from_counts(
        &counts,
        mean_abs_error(pred, gt)?,
        beta2,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Averaging {
    /// Pool counts over everything, then take ratios.
    #[default]
    Micro,
    /// Average per-frame reports.
    Macro,
}

/// Streams `[t, h, w]` prediction/ground-truth pairs into one report.
#[derive(Clone, Debug)]
pub struct Evaluator {
    pub threshold: f64,
    pub beta2: f64,
    pub averaging: Averaging,
    counts: ConfusionCounts,
    abs_err: f64,
    pixels: u64,
    frames: Vec<MetricReport>,
}

impl Default for Evaluator {
    fn default() -> Self {
        Evaluator::new(DEFAULT_THRESHOLD, DEFAULT_BETA2, Averaging::Micro)
    }
}

impl Evaluator {
    pub fn new(threshold: f64, beta2: f64, averaging: Averaging) -> Self {
        Evaluator {
            threshold,
            beta2,
            averaging,
            counts: ConfusionCounts::default(),
            abs_err: 0.0,
            pixels: 0,
            frames: Vec::new(),
        }
    }

    pub fn add(&mut self, pred: &Tensor, gt: &Tensor) -> Result<()> {
        check_pair("evaluate", pred, gt)?;
        let t = pred.shape().first().copied().unwrap_or(1);
        let per = pred.numel() / t;
        for f in 0..t {
            let r = f * per..(f + 1) * per;
            let p = Tensor::new([per], pred.data()[r.clone()].to_vec())?;
            let g = Tensor::new([per], gt.data()[r].to_vec())?;
            let c = confusion(&p, &g, self.threshold)?;
            let abs: f64 = p
                .data()
                .iter()
                .zip(g.data())
                .map(|(a, b)| (a - b).abs())
                .sum();
            let mae = abs / per as f64;
            self.counts.merge(&c);
            self.abs_err += abs;
            self.pixels += per as u64;
            if self.averaging == Averaging::Macro {
                self.frames
                    .push(MetricReport::from_counts(&c, mae, self.beta2));
            }
        }
        Ok(())
    }

    pub fn counts(&self) -> ConfusionCounts {
        self.counts
    }

    pub fn report(&self) -> MetricReport {
        match self.averaging {
            Averaging::Micro => MetricReport::from_counts(
                &self.counts,
                ratio_f(self.abs_err, self.pixels),
                self.beta2,
            ),
            Averaging::Macro => {
                let n = self.frames.len().max(1) as f64;
                let avg = |f: fn(&MetricReport) -> f64| self.frames.iter().map(f).sum::<f64>() / n;
                let (s_ber, n_ber) = (avg(|r| r.s_ber), avg(|r| r.n_ber));
                MetricReport {
                    mae: avg(|r| r.mae),
                    f_beta: avg(|r| r.f_beta),
                    iou: avg(|r| r.iou),
                    ber: (s_ber + n_ber) / 2.0,
                    s_ber,
                    n_ber,
                }
            }
        }
    }
}

fn ratio_f(num: f64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num / den as f64
    }
}
