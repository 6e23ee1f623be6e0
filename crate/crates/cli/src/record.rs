//! Line-oriented record of one training run.

use std::fmt;
use std::str::FromStr;

use vidshadow::metrics::MetricReport;
use vidshadow::model::{EpochLog, LossComponents, PipelineConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub seed: u64,
    pub pipeline: PipelineConfig,
    pub train: TrainConfig,
    pub epochs: Vec<EpochLog>,
    pub report: Option<MetricReport>,
    pub wall_clock_s: f64,
}

impl fmt::Display for RunRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "seed={}", self.seed)?;
        for line in self.pipeline.to_string().lines() {
            writeln!(f, "config.{line}")?;
        }
        for line in self.train.to_string().lines() {
            writeln!(f, "train.{line}")?;
        }
        for e in &self.epochs {
            writeln!(f, "{}", epoch_line(e))?;
        }
        if let Some(r) = &self.report {
            writeln!(f, "report {r}")?;
        }
        writeln!(f, "wall_clock_s={}", self.wall_clock_s)
    }
}

pub fn epoch_line(e: &EpochLog) -> String {
    let l = e.losses;
    format!(
        "epoch={} bce={} hinge={} contrast={} total={}",
        e.epoch, l.bce, l.hinge, l.contrast, l.total
    )
}

fn parse_epoch(line: &str) -> Result<EpochLog, String> {
    let mut vals = [None; 5];
    let keys = ["epoch", "bce", "hinge", "contrast", "total"];
    for tok in line.split_whitespace() {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| format!("bad field {tok:?}"))?;
        let i = keys
            .iter()
            .position(|&x| x == k)
            .ok_or_else(|| format!("unknown epoch field {k:?}"))?;
        vals[i] = Some(v);
    }
    let get = |i: usize| vals[i].ok_or_else(|| format!("missing {}", keys[i]));
    let float = |i: usize| -> Result<f64, String> {
        get(i)?.parse().map_err(|e| format!("{}: {e}", keys[i]))
    };
    Ok(EpochLog {
        epoch: get(0)?.parse().map_err(|e| format!("epoch: {e}"))?,
        losses: LossComponents {
            bce: float(1)?,
            hinge: float(2)?,
            contrast: float(3)?,
            total: float(4)?,
        },
    })
}

impl FromStr for RunRecord {
    type Err = String;
    fn from_str(text: &str) -> Result<Self, String> {
        let mut seed = None;
        let mut wall = None;
        let mut config = String::new();
        let mut train = TrainConfig::default();
        let mut epochs = Vec::new();
        let mut report = None;
        for (n, line) in text.lines().enumerate() {
            let at = |e: String| format!("line {}: {e}", n + 1);
            if line.trim().is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("config.") {
                config.push_str(rest);
                config.push('\n');
            } else if let Some(rest) = line.strip_prefix("train.") {
                let (k, v) = rest
                    .split_once('=')
                    .ok_or_else(|| at("expected key=value".into()))?;
                if !train.set(k, v).map_err(|e| at(e.to_string()))? {
                    return Err(at(format!("unknown train key {k:?}")));
                }
            } else if line.starts_with("epoch=") {
                epochs.push(parse_epoch(line).map_err(at)?);
            } else if let Some(rest) = line.strip_prefix("report ") {
                report = Some(rest.parse().map_err(at)?);
            } else if let Some(v) = line.strip_prefix("seed=") {
                seed = Some(v.parse().map_err(|e| at(format!("seed: {e}")))?);
            } else if let Some(v) = line.strip_prefix("wall_clock_s=") {
                wall = Some(v.parse().map_err(|e| at(format!("wall_clock_s: {e}")))?);
            } else {
                return Err(at(format!("unrecognized line {line:?}")));
            }
        }
        Ok(RunRecord {
            seed: seed.ok_or("missing seed")?,
            pipeline: PipelineConfig::parse_text(&config).map_err(|e| e.to_string())?,
            train,
            epochs,
            report,
            wall_clock_s: wall.ok_or("missing wall_clock_s")?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use vidshadow::attention::AttentionVariant;

    #[test]
    fn record_round_trips() {
        let rec = RunRecord {
            seed: 5,
            pipeline: PipelineConfig {
                attention: AttentionVariant::Soda,
                tau: 0.1 + 0.2,
                ..Default::default()
            },
            train: TrainConfig {
                lr: 3e-4,
                ..Default::default()
            },
            epochs: vec![
                EpochLog {
                    epoch: 1,
                    losses: LossComponents {
                        bce: 0.1 / 3.0,
                        hinge: 1.0,
                        contrast: 0.0,
                        total: std::f64::consts::PI,
                    },
                },
                EpochLog {
                    epoch: 2,
                    losses: LossComponents::default(),
                },
            ],
            report: Some(
                "mae=0.1 fbeta=0.7 iou=0.5 ber=12.5 sber=20 nber=5"
                    .parse()
                    .unwrap(),
            ),
            wall_clock_s: 1.25,
        };
        let back: RunRecord = rec.to_string().parse().unwrap();
        assert_eq!(back, rec);
        let no_report = RunRecord {
            report: None,
            ..rec
        };
        assert_eq!(
            no_report.to_string().parse::<RunRecord>().unwrap(),
            no_report
        );
    }

    #[test]
    fn rejects_garbage() {
        assert!("seed=1\nbogus\nwall_clock_s=0"
            .parse::<RunRecord>()
            .is_err());
        assert!("wall_clock_s=0".parse::<RunRecord>().is_err());
    }
}
