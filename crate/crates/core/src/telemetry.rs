//! Per-update diagnostics and their CSV serialization.
//!
//! # CSV schema (version 1)
//!
//! Header row, then one row per inner update, in this column order:
//!
//! | column            | meaning                                                     |
//! |-------------------|-------------------------------------------------------------|
//! | `round`           | outer round index, from 0                                   |
//! | `update`          | inner update index within the round, from 0                 |
//! | `ratio_log_min`   | smallest raw log ratio `log pi - log pi_old` in the minibatch |
//! | `ratio_log_max`   | largest raw log ratio in the minibatch                      |
//! | `mean_entropy`    | mean next-token entropy (nats) over minibatch token states  |
//! | `kl_ref`          | on-sample estimate of `KL(pi || pi_ref)`                    |
//! | `mean_reward`     | mean binary reward of the round's rollouts                  |
//! | `clip_fraction`   | clipped valid tokens / valid tokens in the minibatch        |
//! | `objective_value` | batch objective before the update                           |
//!
//! Floats are written with Rust's shortest round-trip formatting, lines end
//! with `\n`, and identical inputs give identical bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::PolicyParams;
use crate::rollout::Rollout;

pub const COLUMNS: [&str; 9] = [
    "round",
    "update",
    "ratio_log_min",
    "ratio_log_max",
    "mean_entropy",
    "kl_ref",
    "mean_reward",
    "clip_fraction",
    "objective_value",
];

/// Description of the KL estimator, recorded in run metadata.
pub const KL_ESTIMATOR: &str =
    "mean over minibatch tokens of log pi_theta(o_t) - log pi_ref(o_t); tokens sampled from pi_old";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepTelemetry {
    pub round: usize,
    pub update: usize,
    pub ratio_log_min: f64,
    pub ratio_log_max: f64,
    pub mean_entropy: f64,
    pub kl_ref: f64,
    pub mean_reward: f64,
    pub clip_fraction: f64,
    pub objective_value: f64,
}

impl StepTelemetry {
    pub fn envelope_width(&self) -> f64 {
        self.ratio_log_max - self.ratio_log_min
    }

    fn fields(&self) -> [String; 9] {
        [
            self.round.to_string(),
            self.update.to_string(),
            format!("{:?}", self.ratio_log_min),
            format!("{:?}", self.ratio_log_max),
            format!("{:?}", self.mean_entropy),
            format!("{:?}", self.kl_ref),
            format!("{:?}", self.mean_reward),
            format!("{:?}", self.clip_fraction),
            format!("{:?}", self.objective_value),
        ]
    }
}

/// Extremes of the raw per-token log ratios over valid tokens.
pub fn ratio_envelope(rollouts: &[&Rollout], new_logps: &[Vec<f64>]) -> Result<(f64, f64)> {
    if rollouts.is_empty() {
        return Err(Error::InvalidArgument("empty minibatch".into()));
    }
    crate::rollout::check_len("envelope new_logps", rollouts.len(), new_logps.len())?;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (r, lps) in rollouts.iter().zip(new_logps) {
        crate::rollout::check_len("envelope rollout", r.len(), lps.len())?;
        for ((new, old), &valid) in lps.iter().zip(r.old_logps()).zip(r.mask()) {
            if valid {
                let d = new - old;
                lo = lo.min(d);
                hi = hi.max(d);
            }
        }
    }
    Ok((lo, hi))
}

/// On-sample estimate of `KL(current || reference)`: the mean log-prob gap
/// over the sampled valid tokens. Zero when there are no tokens.
pub fn kl_estimate(
    current: &PolicyParams,
    reference: &PolicyParams,
    rollouts: &[&Rollout],
) -> Result<f64> {
    if current.buckets() != reference.buckets() || current.vocab() != reference.vocab() {
        return Err(Error::Shape {
            context: "kl reference policy",
            expected: current.logits().len(),
            actual: reference.logits().len(),
        });
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for r in rollouts {
        let cur = current.rollout_logps(r)?;
        let refp = reference.rollout_logps(r)?;
        for ((c, q), &valid) in cur.iter().zip(&refp).zip(r.mask()) {
            if valid {
                total += c - q;
                count += 1;
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

pub fn write_csv(series: &[StepTelemetry], path: &Path) -> Result<()> {
    let io = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::io(path, e),
        other => Error::Parse {
            path: path.to_path_buf(),
            message: format!("{other:?}"),
        },
    };
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(io)?;
    w.write_record(COLUMNS).map_err(io)?;
    for rec in series {
        w.write_record(rec.fields()).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn parse_error(path: &Path, message: String) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        message,
    }
}

/// Reads any telemetry-style CSV as a header plus numeric rows.
pub fn read_columns(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| parse_error(path, e.to_string()))?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| parse_error(path, e.to_string()))?
        .iter()
        .map(str::to_owned)
        .collect();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| parse_error(path, e.to_string()))?;
        let row = rec
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_error(path, format!("line {}: {e}", i + 2)))?;
        rows.push(row);
    }
    Ok((header, rows))
}

pub fn read_csv(path: &Path) -> Result<Vec<StepTelemetry>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| parse_error(path, e.to_string()))?;
    let header = rdr.headers().map_err(|e| parse_error(path, e.to_string()))?;
    if header.iter().ne(COLUMNS) {
        return Err(parse_error(path, format!("unexpected header {header:?}")));
    }
    rdr.deserialize()
        .map(|r| r.map_err(|e| parse_error(path, e.to_string())))
        .collect()
}
