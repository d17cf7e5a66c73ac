//! Run configuration: one TOML document holding every hyperparameter.
//!
//! Unknown keys are rejected at every level. Overrides use dotted paths
//! (`model.k=16`, `loss.alpha=0`) and are applied to the parsed document
//! before it is deserialised, so they go through the same validation.
//!
//! Defaults with a published origin: `loss.alpha = 1e-2`, `loss.beta = 1e-3`,
//! `model.k_cap = 44`, `optim.lr_text = 5e-5`, `optim.lr_other = 1e-4`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SynthConfig;
use crate::decomposition::TruncationRule;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub ablation: AblationConfig,
    pub gradcheck: GradcheckConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextEncoder {
    /// Linear projection to the model width followed by an LSTM.
    Projection,
    /// Precomputed text features used as-is; raw width must equal `d`.
    Passthrough,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MainInput {
    /// Pooled aligned constituent of the macro fusion.
    ZcAligned,
    /// Pooled macro fusion before the split.
    Fused,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d: usize,
    pub text_encoder: TextEncoder,
    pub micro_layers: usize,
    pub macro_layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ffn_hidden: usize,
    /// Fixed truncation rank; when unset the rank follows `k_ratio`/`k_cap`.
    pub k: Option<usize>,
    pub k_ratio: f64,
    pub k_cap: usize,
    pub conflict_branch: bool,
    /// What the main prediction head reads.
    pub main_input: MainInput,
    pub ln_eps: f64,
    pub text_dim: Option<usize>,
    pub visual_dim: Option<usize>,
    pub audio_dim: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 32,
            text_encoder: TextEncoder::Projection,
            micro_layers: 2,
            macro_layers: 1,
            heads: 4,
            head_dim: 8,
            ffn_hidden: 64,
            k: None,
            k_ratio: 0.6,
            k_cap: 44,
            conflict_branch: true,
            main_input: MainInput::ZcAligned,
            ln_eps: 1e-5,
            text_dim: None,
            visual_dim: None,
            audio_dim: None,
        }
    }
}

impl ModelConfig {
    pub fn truncation(&self) -> TruncationRule {
        TruncationRule {
            k: self.k,
            ratio: self.k_ratio,
            cap: self.k_cap,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.d", self.d),
            ("model.micro_layers", self.micro_layers),
            ("model.macro_layers", self.macro_layers),
            ("model.heads", self.heads),
            ("model.head_dim", self.head_dim),
            ("model.ffn_hidden", self.ffn_hidden),
            ("model.k_cap", self.k_cap),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d < 2 {
            return Err(Error::Config("model.d must be at least 2".into()));
        }
        if !(self.k_ratio > 0.0 && self.k_ratio <= 1.0) {
            return Err(Error::Config("model.k_ratio must be in (0, 1]".into()));
        }
        if self.k == Some(0) {
            return Err(Error::Config("model.k must be at least 1".into()));
        }
        if !(self.ln_eps >= 0.0 && self.ln_eps.is_finite()) {
            return Err(Error::Config("model.ln_eps must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaSign {
    /// Discrepancy terms are added, penalising disagreement.
    Positive,
    /// Discrepancy terms are subtracted, rewarding disagreement.
    Negative,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub beta_sign: BetaSign,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-2,
            beta: 1e-3,
            beta_sign: BetaSign::Positive,
        }
    }
}

impl LossConfig {
    /// The signed weight applied to the discrepancy terms.
    pub fn effective_beta(&self) -> f64 {
        match self.beta_sign {
            BetaSign::Positive => self.beta,
            BetaSign::Negative => -self.beta,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr_text: f64,
    pub lr_other: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_text: 5e-5,
            lr_other: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// Seed of the train/val/test partition.
    pub split_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 10,
            val_fraction: 0.1,
            test_fraction: 0.2,
            split_seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset file in the line-delimited record format.
    pub path: Option<PathBuf>,
    /// Generate the dataset from `[synth]` instead of reading `path`.
    pub synthetic: bool,
    pub run_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    pub k_sweep: Vec<usize>,
    pub out_dir: Option<PathBuf>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3, 4, 5],
            k_sweep: vec![2, 4, 8, 16],
            out_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub batch_size: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Entries probed per parameter block; 0 probes every entry.
    pub entries_per_block: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            batch_size: 2,
            step: 1e-4,
            tolerance: 1e-4,
            entries_per_block: 16,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = doc.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        for (name, v) in [("loss.alpha", self.loss.alpha), ("loss.beta", self.loss.beta)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0 (use loss.beta_sign for sign)")));
            }
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        let (v, t) = (self.train.val_fraction, self.train.test_fraction);
        if !(0.0..1.0).contains(&v) || !(0.0..1.0).contains(&t) || v + t >= 1.0 {
            return Err(Error::Config("train.val_fraction + train.test_fraction must be in [0, 1)".into()));
        }
        if self.gradcheck.batch_size == 0 || self.gradcheck.step <= 0.0 || self.gradcheck.tolerance <= 0.0 {
            return Err(Error::Config("gradcheck settings must be positive".into()));
        }
        self.synth.validate()?;
        Ok(())
    }
}

/// Applies `a.b.c=value` to a TOML table. The value is parsed as a TOML
/// value when possible and taken as a bare string otherwise.
pub fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override `{spec}` has an empty key")));
    }
    let value = parse_value(raw.trim());
    let (last, parents) = keys.split_last().expect("non-empty");
    let mut table = doc;
    for k in parents {
        let entry = table.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{spec}`: `{k}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
