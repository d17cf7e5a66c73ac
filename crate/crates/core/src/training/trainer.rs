//! Batch objective and the training loop.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{LossConfig, RunConfig};
use crate::data::{common_widths, make_batches, split_dataset, Batch};
use crate::decomposition::SubspaceLog;
use crate::encoders::ModalitySample;
use crate::error::{Error, Result};
use crate::model::{forward_sample, ForwardTrace, Mcan, SampleForward};
use crate::params::BoundParams;
use crate::tensor::{Graph, Tensor, Var};

use super::loss::{total_loss, LossReport};
use super::metrics::{compute_metrics, MetricReport};
use super::optim::Adam;

pub struct BatchForward {
    pub total: Var,
    pub report: LossReport,
    pub preds: Vec<f64>,
    pub samples: Vec<SampleForward>,
}

fn mean_of(g: &mut Graph, parts: &[Var]) -> Result<Var> {
    let cat = g.concat_cols(parts)?;
    let s = g.sum(cat)?;
    g.scale(s, 1.0 / parts.len() as f64)
}

/// Builds the batch objective. Every loss component is the mean of its
/// per-sample values; without the conflict branch the discrepancy terms
/// are zero and `total` is the main loss.
pub fn forward_batch(g: &mut Graph, bound: &BoundParams, model: &Mcan, loss: &LossConfig, batch: &Batch, log: &mut SubspaceLog) -> Result<BatchForward> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let mut samples = Vec::with_capacity(batch.len());
    for item in &batch.items {
        samples.push(forward_sample(g, bound, &model.cfg, model.widths, item, log)?);
    }
    let preds_v: Vec<Var> = samples.iter().map(|s| s.y_main).collect();
    let preds: Vec<f64> = preds_v.iter().map(|v| g.scalar(*v)).collect();
    let p = g.concat_cols(&preds_v)?;
    let y = g.constant(&Tensor::matrix(1, batch.len(), batch.labels())?)?;
    let err = g.sub(p, y)?;
    let sq = g.square(err)?;
    let sse = g.sum(sq)?;
    let main = g.scale(sse, 1.0 / batch.len() as f64)?;

    let (alpha, beta) = (loss.alpha, loss.effective_beta());
    let losses: Vec<_> = samples.iter().filter_map(|s| s.losses).collect();
    if losses.is_empty() {
        let report = total_loss(g.scalar(main), 0.0, 0.0, 0.0, 0.0, alpha, beta)?;
        return Ok(BatchForward {
            total: main,
            report,
            preds,
            samples,
        });
    }
    let oc_micro = mean_of(g, &losses.iter().map(|l| l.oc_micro).collect::<Vec<_>>())?;
    let oc_macro = mean_of(g, &losses.iter().map(|l| l.oc_macro).collect::<Vec<_>>())?;
    let diff_micro = mean_of(g, &losses.iter().map(|l| l.diff_micro).collect::<Vec<_>>())?;
    let diff_macro = mean_of(g, &losses.iter().map(|l| l.diff_macro).collect::<Vec<_>>())?;
    let oc = g.add(oc_micro, oc_macro)?;
    let oc = g.scale(oc, alpha)?;
    let diff = g.add(diff_micro, diff_macro)?;
    let diff = g.scale(diff, beta)?;
    let total = g.add(main, oc)?;
    let total = g.add(total, diff)?;
    let report = total_loss(
        g.scalar(main),
        g.scalar(oc_micro),
        g.scalar(oc_macro),
        g.scalar(diff_micro),
        g.scalar(diff_macro),
        alpha,
        beta,
    )?;
    Ok(BatchForward { total, report, preds, samples })
}

/// Forward pass over a batch returning per-sample traces and the losses.
pub fn forward_full(model: &Mcan, loss: &LossConfig, batch: &Batch) -> Result<(Vec<ForwardTrace>, LossReport)> {
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g)?;
    let out = forward_batch(&mut g, &bound, model, loss, batch, &mut SubspaceLog::record())?;
    let traces = out.samples.iter().map(|s| s.trace(&g)).collect();
    Ok((traces, out.report))
}

/// One optimizer step on `batch`. Returns the pre-update losses and
/// predictions.
pub fn train_step(model: &mut Mcan, adam: &mut Adam, loss: &LossConfig, batch: &Batch) -> Result<(LossReport, Vec<f64>)> {
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g)?;
    let out = forward_batch(&mut g, &bound, model, loss, batch, &mut SubspaceLog::record())?;
    g.backward(out.total)?;
    model.params.collect_grads(&g, &bound)?;
    adam.step(&mut model.params)?;
    Ok((out.report, out.preds))
}

/// Predictions and mean losses over `samples` in input order.
pub fn predict_all(model: &Mcan, loss: &LossConfig, samples: &[ModalitySample], batch_size: usize) -> Result<(Vec<f64>, LossReport)> {
    let mut preds = Vec::with_capacity(samples.len());
    let mut parts = Vec::new();
    for batch in make_batches(samples, batch_size, None)? {
        let mut g = Graph::new();
        let bound = model.params.bind(&mut g)?;
        let out = forward_batch(&mut g, &bound, model, loss, &batch, &mut SubspaceLog::record())?;
        preds.extend(out.preds);
        parts.push((out.report, batch.len()));
    }
    Ok((preds, LossReport::weighted_mean(&parts)?))
}

pub fn evaluate(model: &Mcan, loss: &LossConfig, samples: &[ModalitySample], batch_size: usize) -> Result<(MetricReport, LossReport)> {
    let (preds, report) = predict_all(model, loss, samples, batch_size)?;
    let labels: Vec<f64> = samples.iter().map(|s| s.label).collect();
    Ok((compute_metrics(&preds, &labels)?, report))
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    #[serde(flatten)]
    pub metrics: MetricReport,
    pub loss: LossReport,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub best_epoch: usize,
    pub test: Option<(MetricReport, LossReport)>,
    pub records: Vec<EpochRecord>,
    /// The checkpoint-loaded best model.
    pub model: Mcan,
}

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "best.ckpt";

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (epoch as u64).wrapping_add(1)
}

/// Trains on `samples` with the resolved config and writes the run
/// directory: the config snapshot, one metrics record per split and epoch,
/// and the checkpoint with the best validation MAE (the last epoch when
/// there is no validation split). Test metrics are computed from the
/// reloaded checkpoint.
pub fn train(cfg: &RunConfig, samples: &[ModalitySample], run_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(run_dir)?;
    fs::write(run_dir.join(CONFIG_FILE), cfg.to_toml_string()?)?;
    let mut metrics_file = fs::File::create(run_dir.join(METRICS_FILE))?;

    let splits = split_dataset(samples, cfg.train.val_fraction, cfg.train.test_fraction, cfg.train.split_seed)?;
    let widths = Mcan::resolve_widths(&cfg.model, common_widths(samples)?)?;
    let mut model = Mcan::new(&cfg.model, widths, cfg.seed)?;
    let mut adam = Adam::new(cfg.optim.clone());
    let bs = cfg.train.batch_size;
    let ckpt = run_dir.join(CHECKPOINT_FILE);

    let mut records = Vec::new();
    let mut emit = |rec: EpochRecord, records: &mut Vec<EpochRecord>| -> Result<()> {
        serde_json::to_writer(&mut metrics_file, &rec)?;
        metrics_file.write_all(b"\n")?;
        records.push(rec);
        Ok(())
    };

    let mut best: Option<(f64, usize)> = None;
    for epoch in 1..=cfg.train.epochs {
        let mut preds = Vec::with_capacity(splits.train.len());
        let mut labels = Vec::with_capacity(splits.train.len());
        let mut parts = Vec::new();
        for batch in make_batches(&splits.train, bs, Some(epoch_seed(cfg.seed, epoch)))? {
            let (report, p) = train_step(&mut model, &mut adam, &cfg.loss, &batch)?;
            preds.extend(p);
            labels.extend(batch.labels());
            parts.push((report, batch.len()));
        }
        let train_metrics = compute_metrics(&preds, &labels)?;
        emit(
            EpochRecord {
                epoch,
                split: "train".into(),
                metrics: train_metrics,
                loss: LossReport::weighted_mean(&parts)?,
            },
            &mut records,
        )?;
        let score = if splits.val.len() >= 2 {
            let (m, l) = evaluate(&model, &cfg.loss, &splits.val, bs)?;
            emit(
                EpochRecord {
                    epoch,
                    split: "val".into(),
                    metrics: m,
                    loss: l,
                },
                &mut records,
            )?;
            m.mae
        } else {
            // Without a validation split the latest epoch wins.
            -(epoch as f64)
        };
        if best.is_none_or(|(b, _)| score < b) {
            best = Some((score, epoch));
            checkpoint::save(&ckpt, &model.params)?;
        }
    }
    let best_epoch = best.map(|(_, e)| e).unwrap_or(0);
    if best_epoch == 0 {
        checkpoint::save(&ckpt, &model.params)?;
    }

    let model = Mcan::from_params(&cfg.model, widths, checkpoint::load(&ckpt)?)?;
    let test = if splits.test.len() >= 2 {
        let (m, l) = evaluate(&model, &cfg.loss, &splits.test, bs)?;
        emit(
            EpochRecord {
                epoch: best_epoch,
                split: "test".into(),
                metrics: m,
                loss: l,
            },
            &mut records,
        )?;
        Some((m, l))
    } else {
        None
    };
    Ok(TrainOutcome {
        run_dir: run_dir.to_path_buf(),
        best_epoch,
        test,
        records,
        model,
    })
}

/// Rebuilds the model stored in a run directory.
pub fn load_run(run_dir: &Path, samples: &[ModalitySample]) -> Result<(RunConfig, Mcan)> {
    let cfg = RunConfig::load(&run_dir.join(CONFIG_FILE), &[])?;
    let widths = Mcan::resolve_widths(&cfg.model, common_widths(samples)?)?;
    let model = Mcan::from_params(&cfg.model, widths, checkpoint::load(&run_dir.join(CHECKPOINT_FILE))?)?;
    Ok((cfg, model))
}
