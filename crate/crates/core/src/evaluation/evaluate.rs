use std::fmt::Write as _;
use std::path::Path;

use super::metrics::MetricsReport;
use crate::data::WindowSet;
use crate::error::{Error, Result};
use crate::model::ModelParams;

// small batches keep the intermediates cache resident
const SCORE_BATCH: usize = 16;

/// Scores and metrics of a model on a labelled window set.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

/// Scores every window (inference mode) and computes the metrics.
pub fn evaluate(params: &ModelParams, windows: &WindowSet, threshold: f64) -> Result<Evaluation> {
    let cfg = params.config();
    if windows.window_len != cfg.window_len || windows.feature_dim != cfg.feature_dim {
        return Err(Error::shape(
            "evaluate",
            &[windows.window_len, windows.feature_dim],
            &[cfg.window_len, cfg.feature_dim],
        ));
    }
    let scores = params.score_windows(&windows.data, SCORE_BATCH)?;
    Ok(Evaluation {
        report: MetricsReport::from_scores(&scores, &windows.labels, threshold)?,
        scores,
        labels: windows.labels.clone(),
    })
}

/// `score,label` lines with a header; scores in shortest round-trip form.
pub fn score_dump(scores: &[f64], labels: &[u8]) -> String {
    let mut out = String::from("score,label\n");
    for (s, l) in scores.iter().zip(labels) {
        let _ = writeln!(out, "{s},{l}");
    }
    out
}

pub fn write_score_dump(path: &Path, scores: &[f64], labels: &[u8]) -> Result<()> {
    std::fs::write(path, score_dump(scores, labels)).map_err(|e| Error::io(path, e))
}

/// Parses a score dump back into scores and labels.
pub fn read_score_dump(text: &str) -> Result<(Vec<f64>, Vec<u8>)> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let parse_err = |msg: &str| Error::Parse {
            line: i + 1,
            msg: msg.into(),
        };
        let (s, l) = line
            .split_once(',')
            .ok_or_else(|| parse_err("expected `score,label`"))?;
        scores.push(s.parse().map_err(|_| parse_err("bad score"))?);
        labels.push(match l {
            "0" => 0,
            "1" => 1,
            _ => return Err(parse_err("label must be 0 or 1")),
        });
    }
    Ok((scores, labels))
}
