//! Finite-difference verification of the analytic gradients of the total
//! objective.
//!
//! The split subspaces recorded by the analytic pass are replayed in every
//! perturbed evaluation, so the numeric derivative is taken under the same
//! frozen-subspace semantics as the backward pass.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::config::LossConfig;
use crate::data::Batch;
use crate::decomposition::SubspaceLog;
use crate::error::{Error, Result};
use crate::model::Mcan;
use crate::tensor::{Graph, Tensor};
use crate::training::forward_batch;

#[derive(Clone, Debug, Serialize)]
pub struct BlockReport {
    pub name: String,
    pub numel: usize,
    /// Entries compared.
    pub probed: usize,
    pub max_abs_analytic: f64,
    pub max_abs_numeric: f64,
    pub max_abs_diff: f64,
    /// `max_abs_diff / max(max_abs_analytic, max_abs_numeric, 1e-10)`.
    pub rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub blocks: Vec<BlockReport>,
    pub max_rel_error: f64,
    pub worst_block: String,
    pub tolerance: f64,
    pub passed: bool,
}

/// Analytic gradients of the batch total and the recorded subspaces.
pub fn analytic_gradients(model: &Mcan, loss: &LossConfig, batch: &Batch) -> Result<(BTreeMap<String, Tensor>, SubspaceLog)> {
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g)?;
    let mut log = SubspaceLog::record();
    let out = forward_batch(&mut g, &bound, model, loss, batch, &mut log)?;
    g.backward(out.total)?;
    let mut grads = BTreeMap::new();
    for (name, t) in model.params.iter() {
        let grad = match g.grad_data(bound.var(name)?) {
            Some(d) => Tensor::new(t.shape().to_vec(), d.to_vec())?,
            None => Tensor::zeros(t.shape()),
        };
        grads.insert(name.to_string(), grad);
    }
    Ok((grads, log.into_replay()))
}

fn replay_losses(model: &Mcan, loss: &LossConfig, batch: &Batch, log: &mut SubspaceLog) -> Result<[f64; 5]> {
    log.rewind();
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g)?;
    let r = forward_batch(&mut g, &bound, model, loss, batch, log)?.report;
    Ok([r.main, r.oc_micro, r.oc_macro, r.diff_micro, r.diff_macro])
}

/// Entries probed in a block of `numel`: all of them when `cap` is 0 or
/// at least `numel`, otherwise `cap` evenly strided indices.
pub fn probe_indices(numel: usize, cap: usize) -> Vec<usize> {
    if cap == 0 || numel <= cap {
        (0..numel).collect()
    } else {
        (0..cap).map(|i| i * numel / cap).collect()
    }
}

/// Central differences of the batch total. Each loss component is
/// differenced on its own and the results are combined with the loss
/// weights, so round-off in one component does not swamp the small
/// derivatives of another. Entries outside [`probe_indices`] are left at
/// NaN and skipped by [`compare`].
pub fn numeric_gradients(model: &Mcan, loss: &LossConfig, batch: &Batch, log: &SubspaceLog, step: f64, cap: usize) -> Result<BTreeMap<String, Tensor>> {
    let mut log = log.clone();
    let mut probe = model.clone();
    let (alpha, beta) = (loss.alpha, loss.effective_beta());
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    let mut grads = BTreeMap::new();
    for name in names {
        let base = model.params.get(&name).ok_or_else(|| Error::MissingParam(name.clone()))?;
        let mut out = vec![f64::NAN; base.numel()];
        for j in probe_indices(base.numel(), cap) {
            let x = base.data()[j];
            probe.params.get_mut(&name).expect("cloned").data_mut()[j] = x + step;
            let up = replay_losses(&probe, loss, batch, &mut log)?;
            probe.params.get_mut(&name).expect("cloned").data_mut()[j] = x - step;
            let down = replay_losses(&probe, loss, batch, &mut log)?;
            probe.params.get_mut(&name).expect("cloned").data_mut()[j] = x;
            let d: Vec<f64> = up.iter().zip(&down).map(|(u, v)| (u - v) / (2.0 * step)).collect();
            out[j] = d[0] + alpha * (d[1] + d[2]) + beta * (d[3] + d[4]);
        }
        grads.insert(name, Tensor::from_parts_unchecked(base.shape().to_vec(), out));
    }
    Ok(grads)
}

/// Per-block comparison of two gradient sets with the same names.
pub fn compare(analytic: &BTreeMap<String, Tensor>, numeric: &BTreeMap<String, Tensor>, tolerance: f64) -> Result<GradcheckReport> {
    let mut blocks = Vec::with_capacity(analytic.len());
    for (name, a) in analytic {
        let n = numeric.get(name).ok_or_else(|| Error::MissingParam(name.clone()))?;
        if a.shape() != n.shape() {
            return Err(Error::shape("gradcheck", format!("block `{name}` shapes differ")));
        }
        let (mut diff, mut ma, mut mn, mut probed) = (0.0f64, 0.0f64, 0.0f64, 0);
        for (x, y) in a.data().iter().zip(n.data()) {
            if y.is_nan() {
                continue;
            }
            diff = diff.max((x - y).abs());
            ma = ma.max(x.abs());
            mn = mn.max(y.abs());
            probed += 1;
        }
        blocks.push(BlockReport {
            name: name.clone(),
            numel: a.numel(),
            probed,
            max_abs_analytic: ma,
            max_abs_numeric: mn,
            max_abs_diff: diff,
            rel_error: diff / ma.max(mn).max(1e-10),
        });
    }
    let worst = blocks
        .iter()
        .max_by(|x, y| x.rel_error.total_cmp(&y.rel_error))
        .ok_or_else(|| Error::Graph("no parameters to check".into()))?;
    let (max_rel_error, worst_block) = (worst.rel_error, worst.name.clone());
    Ok(GradcheckReport {
        passed: max_rel_error <= tolerance,
        blocks,
        max_rel_error,
        worst_block,
        tolerance,
    })
}

pub fn gradcheck(model: &Mcan, loss: &LossConfig, batch: &Batch, step: f64, tolerance: f64, cap: usize) -> Result<GradcheckReport> {
    let (analytic, log) = analytic_gradients(model, loss, batch)?;
    let numeric = numeric_gradients(model, loss, batch, &log, step, cap)?;
    compare(&analytic, &numeric, tolerance)
}
