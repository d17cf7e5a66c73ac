//! Ablation matrix: the full model, each loss removed, the conflict branch
//! removed, and a sweep of truncation ranks, each trained over several
//! seeds and summarised as mean ± sample standard deviation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::{AblationConfig, RunConfig};
use crate::encoders::ModalitySample;
use crate::error::{Error, Result};
use crate::training::{train, MetricReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoDiff,
    NoOc,
    NoCmb,
    TopK(usize),
}

impl Variant {
    pub fn label(&self) -> String {
        match self {
            Variant::Full => "MCAN".into(),
            Variant::NoDiff => "w/o L_diff".into(),
            Variant::NoOc => "w/o L_oc".into(),
            Variant::NoCmb => "w/o CMB".into(),
            Variant::TopK(k) => format!("Top-{k}"),
        }
    }

    /// Directory name of the variant's runs.
    pub fn slug(&self) -> String {
        match self {
            Variant::Full => "full".into(),
            Variant::NoDiff => "no_diff".into(),
            Variant::NoOc => "no_oc".into(),
            Variant::NoCmb => "no_cmb".into(),
            Variant::TopK(k) => format!("top{k}"),
        }
    }

    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoDiff => cfg.loss.beta = 0.0,
            Variant::NoOc => cfg.loss.alpha = 0.0,
            Variant::NoCmb => cfg.model.conflict_branch = false,
            Variant::TopK(k) => cfg.model.k = Some(*k),
        }
        cfg
    }
}

/// Full, the three removals, then one row per swept rank.
pub fn standard_matrix(cfg: &AblationConfig) -> Vec<Variant> {
    let mut v = vec![Variant::Full, Variant::NoDiff, Variant::NoOc, Variant::NoCmb];
    v.extend(cfg.k_sweep.iter().map(|&k| Variant::TopK(k)));
    v
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self::default();
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let sd = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, sd }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct MetricSummary {
    pub acc2: MeanSd,
    pub acc7: MeanSd,
    pub f1: MeanSd,
    pub corr: MeanSd,
    pub mae: MeanSd,
}

impl MetricSummary {
    pub fn of(runs: &[MetricReport]) -> Self {
        let col = |f: fn(&MetricReport) -> f64| MeanSd::of(&runs.iter().map(f).collect::<Vec<_>>());
        Self {
            acc2: col(|m| m.acc2),
            acc7: col(|m| m.acc7),
            f1: col(|m| m.f1),
            corr: col(|m| m.corr),
            mae: col(|m| m.mae),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Cell {
    pub seed: u64,
    pub run_dir: PathBuf,
    pub test: MetricReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub label: String,
    pub cells: Vec<Cell>,
    pub summary: MetricSummary,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

fn fmt_pct(m: MeanSd) -> String {
    format!("{:.1}±{:.1}", 100.0 * m.mean, 100.0 * m.sd)
}

fn fmt_abs(m: MeanSd) -> String {
    format!("{:.3}±{:.3}", m.mean, m.sd)
}

impl AblationReport {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    /// Plain-text table: removal rows first, then the truncation sweep.
    /// Acc2, Acc7 and F1 are percentages.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let header = format!("{:<16} {:>12} {:>12} {:>12} {:>13} {:>13}", "Model", "Acc2", "Acc7", "F1", "Corr", "MAE");
        let rule = "-".repeat(header.len());
        let line = |out: &mut String, r: &AblationRow| {
            let s = &r.summary;
            let _ = writeln!(
                out,
                "{:<16} {:>12} {:>12} {:>12} {:>13} {:>13}",
                r.label,
                fmt_pct(s.acc2),
                fmt_pct(s.acc7),
                fmt_pct(s.f1),
                fmt_abs(s.corr),
                fmt_abs(s.mae)
            );
        };
        let _ = writeln!(out, "{header}\n{rule}");
        for r in self.rows.iter().filter(|r| !matches!(r.variant, Variant::TopK(_))) {
            line(&mut out, r);
        }
        let sweep: Vec<_> = self.rows.iter().filter(|r| matches!(r.variant, Variant::TopK(_))).collect();
        if !sweep.is_empty() {
            let _ = writeln!(out, "{rule}\nEffect of truncation positions");
            for r in sweep {
                line(&mut out, r);
            }
        }
        let seeds = self.rows.first().map_or(0, |r| r.cells.len());
        let _ = writeln!(out, "{rule}\nmean±sd over {seeds} seed(s), test split");
        out
    }
}

/// Trains every `(variant, seed)` cell under `out_dir/<variant>/seed<seed>`
/// and writes `report.json` and `report.txt` to `out_dir`.
pub fn run_ablation(base: &RunConfig, samples: &[ModalitySample], variants: &[Variant], seeds: &[u64], out_dir: &Path) -> Result<AblationReport> {
    if seeds.is_empty() || variants.is_empty() {
        return Err(Error::Config("ablation needs at least one seed and one variant".into()));
    }
    let mut report = AblationReport::default();
    for &v in variants {
        let mut cells = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut cfg = v.apply(base);
            cfg.seed = seed;
            let dir = out_dir.join(v.slug()).join(format!("seed{seed}"));
            let outcome = train(&cfg, samples, &dir)?;
            let (test, _) = outcome
                .test
                .ok_or_else(|| Error::Config("ablation needs a test split with at least two samples".into()))?;
            cells.push(Cell { seed, run_dir: dir, test });
        }
        let summary = MetricSummary::of(&cells.iter().map(|c| c.test).collect::<Vec<_>>());
        report.rows.push(AblationRow {
            variant: v,
            label: v.label(),
            cells,
            summary,
        });
    }
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    fs::write(out_dir.join("report.txt"), report.render_table())?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_sample_sd() {
        let m = MeanSd::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.mean, 2.5);
        assert!((m.sd - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(MeanSd::of(&[7.0]).sd, 0.0);
    }

    #[test]
    fn matrix_layout() {
        let cfg = AblationConfig {
            k_sweep: vec![2, 4, 8, 16],
            ..AblationConfig::default()
        };
        let m = standard_matrix(&cfg);
        assert_eq!(m.len(), 8);
        assert_eq!(m.iter().filter(|v| matches!(v, Variant::TopK(_))).count(), 4);
        let base = RunConfig::default();
        assert!(!Variant::NoCmb.apply(&base).model.conflict_branch);
        assert_eq!(Variant::NoDiff.apply(&base).loss.beta, 0.0);
        assert_eq!(Variant::NoOc.apply(&base).loss.alpha, 0.0);
        assert_eq!(Variant::TopK(8).apply(&base).model.k, Some(8));
    }

    #[test]
    fn table_has_one_line_per_row() {
        let blank = MetricReport {
            acc2: 0.5,
            acc7: 0.2,
            f1: 0.5,
            corr: 0.1,
            mae: 1.0,
            n_binary: 2,
            n: 2,
        };
        let rows = [Variant::Full, Variant::NoCmb, Variant::TopK(2), Variant::TopK(4)]
            .into_iter()
            .map(|v| AblationRow {
                variant: v,
                label: v.label(),
                cells: vec![],
                summary: MetricSummary::of(&[blank]),
            })
            .collect();
        let text = AblationReport { rows }.render_table();
        assert!(text.contains("w/o CMB"));
        assert!(text.contains("Effect of truncation positions"));
        assert_eq!(text.lines().filter(|l| l.starts_with("Top-")).count(), 2);
        assert!(text.contains("50.0±0.0"));
    }
}
