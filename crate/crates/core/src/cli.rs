//! Command-line surface. Every command prints one JSON document on stdout.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use crate::ablation::{run_ablation, standard_matrix, Variant};
use crate::config::RunConfig;
use crate::data::{generate_synthetic, make_batches, resolve_dataset, split_dataset, write_dataset, PaddedSample};
use crate::decomposition::{split_aligned_conflict, TruncationRule};
use crate::error::{Error, Result};
use crate::gradcheck::gradcheck;
use crate::model::Mcan;
use crate::tensor::Tensor;
use crate::training::{evaluate, load_run, train};

#[derive(Debug, Parser)]
#[command(name = "mcan", version, about = "Multi-level conflict-aware multimodal sentiment regression")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML run configuration; defaults are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted-path overrides such as `model.k=16` or `loss.alpha=0`.
    #[arg(value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load(p, &self.overrides),
            None => RunConfig::from_toml_str("", &self.overrides),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write a run directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset file; overrides `data.path`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Use the `[synth]` generator instead of a dataset file.
        #[arg(long)]
        synthetic: bool,
        /// Output directory; overrides `data.run_dir`.
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Evaluate the checkpoint of a run directory.
    Eval {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long, value_enum, default_value_t = EvalSplit::Test)]
        split: EvalSplit,
    },
    /// Run the ablation matrix.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory; overrides `ablation.out_dir`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Restrict to some variants, e.g. `full,no_cmb,top8`.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write a synthetic dataset file.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a matrix into aligned and conflict constituents.
    Decompose {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// JSON matrix (list of rows), inline or as a file path.
        #[arg(long, conflicts_with = "sample")]
        matrix: Option<String>,
        /// Index of a dataset sample whose fused representation is split.
        #[arg(long)]
        sample: Option<usize>,
        /// Fusion to split for `--sample`.
        #[arg(long, value_enum, default_value_t = Site::Ta)]
        site: Site,
        /// Truncation rank; defaults to the configured rule.
        #[arg(long)]
        k: Option<usize>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalSplit {
    Train,
    Val,
    Test,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Site {
    Ta,
    Tv,
    C,
}

/// Result of a command: the JSON to print and whether it succeeded.
pub struct Outcome {
    pub json: Value,
    pub success: bool,
}

impl From<Value> for Outcome {
    fn from(json: Value) -> Self {
        Self { json, success: true }
    }
}

pub fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Train { cfg, data, synthetic, run_dir } => cmd_train(&cfg, data, synthetic, run_dir).map(Into::into),
        Command::Eval { run_dir, split } => cmd_eval(&run_dir, split).map(Into::into),
        Command::Ablate { cfg, out_dir, variants } => cmd_ablate(&cfg, out_dir, &variants).map(Into::into),
        Command::Gradcheck { cfg } => cmd_gradcheck(&cfg),
        Command::Synth { cfg, out } => cmd_synth(&cfg, &out).map(Into::into),
        Command::Decompose { cfg, matrix, sample, site, k } => cmd_decompose(&cfg, matrix.as_deref(), sample, site, k).map(Into::into),
    }
}

pub fn cmd_train(args: &ConfigArgs, data: Option<PathBuf>, synthetic: bool, run_dir: Option<PathBuf>) -> Result<Value> {
    let mut cfg = args.load()?;
    if let Some(p) = data {
        cfg.data.path = Some(p);
    }
    if synthetic {
        cfg.data.synthetic = true;
    }
    if let Some(p) = cfg.data.path.as_mut() {
        if let Ok(abs) = std::fs::canonicalize(&*p) {
            *p = abs;
        }
    }
    let run_dir = run_dir
        .or_else(|| cfg.data.run_dir.clone())
        .unwrap_or_else(|| PathBuf::from(format!("runs/seed{}", cfg.seed)));
    cfg.data.run_dir = Some(run_dir.clone());
    let samples = resolve_dataset(&cfg.data, &cfg.synth)?;
    let outcome = train(&cfg, &samples, &run_dir)?;
    Ok(json!({
        "run_dir": run_dir,
        "best_epoch": outcome.best_epoch,
        "test": outcome.test.map(|(m, l)| json!({"metrics": m, "loss": l})),
    }))
}

pub fn cmd_eval(run_dir: &Path, split: EvalSplit) -> Result<Value> {
    let cfg = RunConfig::load(&run_dir.join(crate::training::trainer::CONFIG_FILE), &[])?;
    let samples = resolve_dataset(&cfg.data, &cfg.synth)?;
    let (cfg, model) = load_run(run_dir, &samples)?;
    let splits = split_dataset(&samples, cfg.train.val_fraction, cfg.train.test_fraction, cfg.train.split_seed)?;
    let (name, chosen) = match split {
        EvalSplit::Train => ("train", &splits.train),
        EvalSplit::Val => ("val", &splits.val),
        EvalSplit::Test => ("test", &splits.test),
        EvalSplit::All => ("all", &samples),
    };
    let (metrics, loss) = evaluate(&model, &cfg.loss, chosen, cfg.train.batch_size)?;
    let mut out = serde_json::to_value(metrics)?;
    out["split"] = json!(name);
    out["n"] = json!(chosen.len());
    out["loss"] = serde_json::to_value(loss)?;
    Ok(out)
}

fn parse_variant(s: &str) -> Result<Variant> {
    Ok(match s.trim() {
        "full" => Variant::Full,
        "no_diff" => Variant::NoDiff,
        "no_oc" => Variant::NoOc,
        "no_cmb" => Variant::NoCmb,
        other => match other.strip_prefix("top").and_then(|k| k.parse().ok()) {
            Some(k) if k > 0 => Variant::TopK(k),
            _ => return Err(Error::Config(format!("unknown ablation variant `{other}`"))),
        },
    })
}

pub fn cmd_ablate(args: &ConfigArgs, out_dir: Option<PathBuf>, variants: &[String]) -> Result<Value> {
    let cfg = args.load()?;
    let out_dir = out_dir
        .or_else(|| cfg.ablation.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs/ablation"));
    let variants = if variants.is_empty() {
        standard_matrix(&cfg.ablation)
    } else {
        variants.iter().map(|v| parse_variant(v)).collect::<Result<_>>()?
    };
    let samples = resolve_dataset(&cfg.data, &cfg.synth)?;
    let report = run_ablation(&cfg, &samples, &variants, &cfg.ablation.seeds, &out_dir)?;
    eprint!("{}", report.render_table());
    Ok(json!({
        "out_dir": out_dir,
        "rows": report.rows.iter().map(|r| json!({"variant": r.label, "summary": r.summary})).collect::<Vec<_>>(),
    }))
}

pub fn cmd_gradcheck(args: &ConfigArgs) -> Result<Outcome> {
    let cfg = args.load()?;
    let mut data = cfg.data.clone();
    if data.path.is_none() {
        data.synthetic = true;
    }
    let samples = resolve_dataset(&data, &cfg.synth)?;
    let n = cfg.gradcheck.batch_size.min(samples.len());
    let head = &samples[..n];
    let widths = Mcan::resolve_widths(&cfg.model, crate::data::common_widths(head)?)?;
    let model = Mcan::new(&cfg.model, widths, cfg.seed)?;
    let batch = make_batches(head, n, None)?.remove(0);
    let g = &cfg.gradcheck;
    let report = gradcheck(&model, &cfg.loss, &batch, g.step, g.tolerance, g.entries_per_block)?;
    Ok(Outcome {
        success: report.passed,
        json: serde_json::to_value(&report)?,
    })
}

pub fn cmd_synth(args: &ConfigArgs, out: &Path) -> Result<Value> {
    let cfg = args.load()?;
    let ds = generate_synthetic(&cfg.synth)?;
    write_dataset(out, &ds.samples)?;
    let unimodal = ds.tags.iter().filter(|t| t.unimodal.is_some()).count();
    let bimodal = ds.tags.iter().filter(|t| t.bimodal.is_some()).count();
    Ok(json!({
        "path": out,
        "n_samples": ds.samples.len(),
        "unimodal_conflicts": unimodal,
        "bimodal_conflicts": bimodal,
    }))
}

fn parse_matrix(arg: &str) -> Result<Tensor> {
    let text = if Path::new(arg).is_file() {
        std::fs::read_to_string(arg)?
    } else {
        arg.to_string()
    };
    let rows: Vec<Vec<f64>> = serde_json::from_str(&text).map_err(|e| Error::Config(format!("--matrix: {e}")))?;
    if rows.is_empty() {
        return Err(Error::Config("--matrix: no rows".into()));
    }
    Tensor::from_rows(&rows).map_err(|e| Error::Config(format!("--matrix: {e}")))
}

fn valid_rows(t: &Tensor, mask: &[bool]) -> Result<Tensor> {
    let rows: Vec<&[f64]> = (0..t.rows()).filter(|&i| mask[i]).map(|i| t.row(i)).collect();
    Tensor::from_rows(&rows)
}

pub fn cmd_decompose(args: &ConfigArgs, matrix: Option<&str>, sample: Option<usize>, site: Site, k: Option<usize>) -> Result<Value> {
    let cfg = args.load()?;
    let f = match (matrix, sample) {
        (Some(m), _) => parse_matrix(m)?,
        (None, Some(i)) => {
            let mut data = cfg.data.clone();
            if data.path.is_none() {
                data.synthetic = true;
            }
            let samples = resolve_dataset(&data, &cfg.synth)?;
            let s = samples
                .get(i)
                .ok_or_else(|| Error::Config(format!("--sample {i} out of range ({} samples)", samples.len())))?;
            let widths = Mcan::resolve_widths(&cfg.model, crate::data::common_widths(&samples)?)?;
            let model = Mcan::new(&cfg.model, widths, cfg.seed)?;
            let trace = model.trace(&PaddedSample::unpadded(s))?;
            let fused = match site {
                Site::Ta => trace.get("F_ta")?.clone(),
                Site::Tv => trace.get("F_tv")?.clone(),
                // The macro fusion is not traced; its two constituents sum to it.
                Site::C => trace.get("Z_c_aligned")?.add(trace.get("Z_c_conflict")?)?,
            };
            let mask = match site {
                Site::Ta => &trace.masks["ta"],
                Site::Tv => &trace.masks["tv"],
                Site::C => &trace.masks["c"],
            };
            valid_rows(&fused, mask)?
        }
        (None, None) => return Err(Error::Config("decompose needs --matrix or --sample".into())),
    };
    let (m, n) = f.dims2()?;
    let rule = match k {
        Some(k) => TruncationRule::fixed(k),
        None => cfg.model.truncation(),
    };
    let k_req = rule.requested(m.min(n));
    if k_req == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let split = split_aligned_conflict(&f, k_req)?;
    let rows = |t: &Tensor| (0..t.rows()).map(|r| t.row(r).to_vec()).collect::<Vec<_>>();
    Ok(json!({
        "shape": [m, n],
        "k_requested": k_req,
        "k_used": split.k_used,
        "spectrum": split.spectrum.data(),
        "input_norm": f.frobenius_norm(),
        "aligned_norm": split.aligned.frobenius_norm(),
        "conflict_norm": split.conflict.frobenius_norm(),
        "aligned": rows(&split.aligned),
        "conflict": rows(&split.conflict),
    }))
}
