//! Regression and sentiment-classification metrics.
//!
//! Acc2 and F1 use the negative / non-negative split and skip samples whose
//! label is exactly zero; a prediction `>= 0` counts as positive. Acc7
//! rounds prediction and label to integers after clamping to `[-3, 3]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub acc2: f64,
    pub acc7: f64,
    pub f1: f64,
    pub corr: f64,
    pub mae: f64,
    /// Samples counted by Acc2 and F1 (nonzero labels).
    #[serde(skip)]
    pub n_binary: usize,
    #[serde(skip)]
    pub n: usize,
}

fn class7(x: f64) -> i64 {
    x.clamp(-3.0, 3.0).round() as i64
}

pub fn compute_metrics(preds: &[f64], labels: &[f64]) -> Result<MetricReport> {
    let n = preds.len();
    if n != labels.len() {
        return Err(Error::shape("compute_metrics", format!("{n} predictions, {} labels", labels.len())));
    }
    if n < 2 {
        return Err(Error::Data("metrics need at least two samples".into()));
    }
    if preds.iter().chain(labels).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "compute_metrics" });
    }
    let nf = n as f64;
    let mae = preds.iter().zip(labels).map(|(p, y)| (p - y).abs()).sum::<f64>() / nf;

    let mp = preds.iter().sum::<f64>() / nf;
    let ml = labels.iter().sum::<f64>() / nf;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (p, y) in preds.iter().zip(labels) {
        let (dp, dy) = (p - mp, y - ml);
        sxy += dp * dy;
        sxx += dp * dp;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Data("correlation undefined: zero variance".into()));
    }
    let corr = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);

    let acc7 = preds.iter().zip(labels).filter(|(p, y)| class7(**p) == class7(**y)).count() as f64 / nf;

    let (mut tp, mut fp, mut fn_, mut correct, mut n_binary) = (0usize, 0usize, 0usize, 0usize, 0usize);
    for (p, y) in preds.iter().zip(labels) {
        if *y == 0.0 {
            continue;
        }
        n_binary += 1;
        let (pp, yp) = (*p >= 0.0, *y > 0.0);
        if pp == yp {
            correct += 1;
        }
        match (pp, yp) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if n_binary == 0 {
        return Err(Error::Data("every label is zero; Acc2 is undefined".into()));
    }
    let acc2 = correct as f64 / n_binary as f64;
    let f1 = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
    Ok(MetricReport {
        acc2,
        acc7,
        f1,
        corr,
        mae,
        n_binary,
        n,
    })
}
