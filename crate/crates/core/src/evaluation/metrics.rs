use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default decision threshold; a score equal to it counts as positive.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn check_lengths(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::shape("metrics", &[scores.len()], &[labels.len()]));
    }
    Ok(())
}

/// Counts outcomes with `score ≥ threshold` predicted positive.
pub fn confusion(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Confusion> {
    check_lengths(scores, labels)?;
    let mut c = Confusion::default();
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Precision, recall and F1; each is 0 when its denominator is 0.
pub fn precision_recall_f1(c: &Confusion) -> (f64, f64, f64) {
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let p = ratio(c.tp, c.tp + c.fp);
    let r = ratio(c.tp, c.tp + c.fn_);
    (p, r, f1_score(p, r))
}

/// Harmonic mean of precision and recall, 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Area under the ROC curve as the Mann–Whitney statistic, with ties
/// credited one half. Sort-based, `O(n log n)`.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores, labels)?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric("AUC of NaN scores".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes ({pos} positive, {neg} negative)"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // walk groups of tied scores; each positive beats every earlier negative
    // and ties with the negatives of its own group
    let mut concordant = 0.0;
    let mut neg_below = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut gp, mut gn) = (0usize, 0usize);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                gp += 1;
            } else {
                gn += 1;
            }
            j += 1;
        }
        concordant += gp as f64 * (neg_below as f64 + 0.5 * gn as f64);
        neg_below += gn;
        i = j;
    }
    Ok(concordant / (pos as f64 * neg as f64))
}

/// One operating point of the ROC curve: windows scoring at or above
/// `threshold` are flagged.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC curve from (0, 0) to (1, 1), one point per distinct score in
/// decreasing order. Its trapezoid area equals [`auc`].
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<RocPoint>> {
    auc(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let neg = labels.len() as f64 - pos;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: s,
            fpr: fp as f64 / neg,
            tpr: tp as f64 / pos,
        });
    }
    Ok(points)
}

/// Threshold metrics plus AUC for one scored set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: f64,
    pub confusion: Confusion,
    pub threshold: f64,
    pub n_samples: usize,
}

impl MetricsReport {
    pub fn from_scores(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Self> {
        let c = confusion(scores, labels, threshold)?;
        let (precision, recall, f1) = precision_recall_f1(&c);
        Ok(MetricsReport {
            precision,
            recall,
            f1,
            auc: auc(scores, labels)?,
            confusion: c,
            threshold,
            n_samples: scores.len(),
        })
    }
}
