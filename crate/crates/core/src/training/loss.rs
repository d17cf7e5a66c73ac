//! Main regression loss and the weighted total objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Batch-mean loss components and the weights that combine them.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub main: f64,
    pub oc_micro: f64,
    pub oc_macro: f64,
    pub diff_micro: f64,
    pub diff_macro: f64,
    pub total: f64,
    #[serde(skip)]
    pub alpha: f64,
    #[serde(skip)]
    pub beta: f64,
}

/// Mean squared error.
pub fn main_loss(y_hat: &[f64], y: &[f64]) -> Result<f64> {
    if y_hat.is_empty() {
        return Err(Error::Data("main_loss on an empty batch".into()));
    }
    if y_hat.len() != y.len() {
        return Err(Error::shape("main_loss", format!("{} predictions, {} labels", y_hat.len(), y.len())));
    }
    let sse: f64 = y_hat.iter().zip(y).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sse / y.len() as f64)
}

/// `main + alpha (oc_micro + oc_macro) + beta (diff_micro + diff_macro)`.
/// `beta` is the signed weight.
pub fn total_loss(main: f64, oc_micro: f64, oc_macro: f64, diff_micro: f64, diff_macro: f64, alpha: f64, beta: f64) -> Result<LossReport> {
    for v in [main, oc_micro, oc_macro, diff_micro, diff_macro, alpha, beta] {
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "total_loss" });
        }
    }
    let total = main + alpha * (oc_micro + oc_macro) + beta * (diff_micro + diff_macro);
    Ok(LossReport {
        main,
        oc_micro,
        oc_macro,
        diff_micro,
        diff_macro,
        total,
        alpha,
        beta,
    })
}

impl LossReport {
    /// Sample-count weighted mean of per-batch reports.
    pub fn weighted_mean(parts: &[(LossReport, usize)]) -> Result<LossReport> {
        let n: usize = parts.iter().map(|(_, c)| c).sum();
        if n == 0 {
            return Err(Error::Data("no batches to average".into()));
        }
        let avg = |f: fn(&LossReport) -> f64| parts.iter().map(|(r, c)| f(r) * *c as f64).sum::<f64>() / n as f64;
        let (alpha, beta) = (parts[0].0.alpha, parts[0].0.beta);
        total_loss(
            avg(|r| r.main),
            avg(|r| r.oc_micro),
            avg(|r| r.oc_macro),
            avg(|r| r.diff_micro),
            avg(|r| r.diff_macro),
            alpha,
            beta,
        )
    }
}
