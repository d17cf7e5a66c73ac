//! The full network: encoders, two Micro-MSINs, the aligned/conflict
//! splits, the Macro-MSIN, the main head and the optional conflict branch.

use std::collections::BTreeMap;

use crate::attention::{declare_msin, msin_forward, FfnParams, MsinConfig};
use crate::config::{MainInput, ModelConfig};
use crate::conflict::{branch_losses, build_conflict_features, declare_conflict_branch, BranchInputs, BranchLosses, BranchVars};
use crate::data::{PaddedSample, Widths};
use crate::decomposition::{split_in_graph, SubspaceLog};
use crate::encoders::{declare_encoders, encode_av, encode_text};
use crate::error::{Error, Result};
use crate::params::{BoundParams, McanParams, ParamSpecs};
use crate::tensor::{Graph, Tensor, Var};

/// Names of the traced intermediates, in pipeline order.
pub const TRACE_KEYS: [&str; 22] = [
    "F_t",
    "F_v",
    "F_a",
    "F_ta",
    "F_tv",
    "F_ta_aligned",
    "F_ta_conflict",
    "F_tv_aligned",
    "F_tv_conflict",
    "Z_c_aligned",
    "Z_c_conflict",
    "F_t_prime",
    "F_v_prime",
    "F_a_prime",
    "F_tv_dprime",
    "F_ta_dprime",
    "y_main",
    "y_t",
    "y_v",
    "y_a",
    "y_tv",
    "y_ta",
];

/// Split sites in visiting order.
pub const SPLIT_SITES: [&str; 3] = ["F_ta", "F_tv", "F_c"];

#[derive(Clone, Debug)]
pub struct Mcan {
    pub cfg: ModelConfig,
    pub widths: Widths,
    pub params: McanParams,
}

impl Mcan {
    /// Resolves the raw widths from the config, falling back to `data`.
    pub fn resolve_widths(cfg: &ModelConfig, data: Widths) -> Result<Widths> {
        let pick = |name: &str, configured: Option<usize>, seen: usize| match configured {
            Some(w) if w != seen => Err(Error::Config(format!("model.{name}_dim = {w} but the data has width {seen}"))),
            _ => Ok(seen),
        };
        Ok(Widths {
            text: pick("text", cfg.text_dim, data.text)?,
            visual: pick("visual", cfg.visual_dim, data.visual)?,
            audio: pick("audio", cfg.audio_dim, data.audio)?,
        })
    }

    pub fn specs(cfg: &ModelConfig, widths: Widths) -> ParamSpecs {
        let mut specs = ParamSpecs::new();
        declare_encoders(&mut specs, cfg, widths.text, widths.visual, widths.audio);
        let micro = MsinConfig::micro(cfg);
        specs.scoped("micro_ta", |s| declare_msin(s, &micro));
        specs.scoped("micro_tv", |s| declare_msin(s, &micro));
        specs.scoped("macro", |s| declare_msin(s, &MsinConfig::macro_level(cfg)));
        specs.scoped("head", |s| s.scoped("main", |s| FfnParams::declare(s, cfg.d, cfg.ffn_hidden, 1)));
        if cfg.conflict_branch {
            declare_conflict_branch(&mut specs, cfg);
        }
        specs
    }

    pub fn new(cfg: &ModelConfig, widths: Widths, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            widths,
            params: McanParams::init(&Self::specs(cfg, widths), seed),
        })
    }

    /// Wraps loaded parameters after checking names and shapes.
    pub fn from_params(cfg: &ModelConfig, widths: Widths, params: McanParams) -> Result<Self> {
        cfg.validate()?;
        let specs = Self::specs(cfg, widths);
        if specs.specs().len() != params.len() {
            return Err(Error::Checkpoint(format!("expected {} tensors, found {}", specs.specs().len(), params.len())));
        }
        for spec in specs.specs() {
            let t = params
                .get(&spec.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{}`", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            widths,
            params,
        })
    }

    /// Main-head prediction for one sample, without gradients.
    pub fn predict(&self, sample: &PaddedSample) -> Result<f64> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g)?;
        let out = forward_sample(&mut g, &bound, &self.cfg, self.widths, sample, &mut SubspaceLog::record())?;
        Ok(g.scalar(out.y_main))
    }

    /// Runs one sample and returns every named intermediate.
    pub fn trace(&self, sample: &PaddedSample) -> Result<ForwardTrace> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g)?;
        let out = forward_sample(&mut g, &bound, &self.cfg, self.widths, sample, &mut SubspaceLog::record())?;
        Ok(out.trace(&g))
    }
}

#[derive(Clone, Debug)]
pub struct SplitInfo {
    pub site: &'static str,
    pub k_used: usize,
    pub spectrum: Vec<f64>,
}

/// Graph handles for one sample's forward pass.
pub struct SampleForward {
    pub y_main: Var,
    pub branch: Option<BranchVars>,
    pub losses: Option<BranchLosses>,
    pub vars: BTreeMap<&'static str, Var>,
    pub masks: BTreeMap<&'static str, Vec<bool>>,
    pub splits: Vec<SplitInfo>,
}

/// Named values of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub entries: BTreeMap<&'static str, Tensor>,
    pub masks: BTreeMap<&'static str, Vec<bool>>,
    pub splits: Vec<SplitInfo>,
}

impl ForwardTrace {
    pub fn get(&self, key: &'static str) -> Result<&Tensor> {
        self.entries.get(key).ok_or(Error::MissingTrace(key))
    }

    pub fn keys(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.entries.keys().copied()
    }
}

impl SampleForward {
    pub fn trace(&self, g: &Graph) -> ForwardTrace {
        ForwardTrace {
            entries: self.vars.iter().map(|(k, v)| (*k, g.value(*v))).collect(),
            masks: self.masks.clone(),
            splits: self.splits.clone(),
        }
    }
}

fn concat_mask(a: &[bool], b: &[bool]) -> Vec<bool> {
    a.iter().chain(b).copied().collect()
}

/// Builds the forward graph of one padded sample on already-bound
/// parameters. Split subspaces are taken from or appended to `log`.
pub fn forward_sample(g: &mut Graph, bound: &BoundParams, cfg: &ModelConfig, widths: Widths, s: &PaddedSample, log: &mut SubspaceLog) -> Result<SampleForward> {
    let root = bound.scope();
    let enc = root.child("enc");
    let t = g.constant(&s.text)?;
    let v = g.constant(&s.visual)?;
    let a = g.constant(&s.audio)?;
    let f_t = encode_text(g, &enc, cfg, widths.text, t, &s.mask_t)?;
    let f_v = encode_av(g, &enc.child("visual"), widths.visual, v, &s.mask_v)?;
    let f_a = encode_av(g, &enc.child("audio"), widths.audio, a, &s.mask_a)?;

    let micro = MsinConfig::micro(cfg);
    let eps = cfg.ln_eps;
    let ta = msin_forward(g, &root.child("micro_ta"), &micro, eps, f_t, f_a, &s.mask_t, &s.mask_a)?;
    let tv = msin_forward(g, &root.child("micro_tv"), &micro, eps, f_t, f_v, &s.mask_t, &s.mask_v)?;

    let rule = cfg.truncation();
    let mut splits = Vec::with_capacity(3);
    let ta_split = split_in_graph(g, ta.fused, &ta.mask, &rule, log)?;
    splits.push(SplitInfo {
        site: SPLIT_SITES[0],
        k_used: ta_split.k_used,
        spectrum: ta_split.spectrum.clone(),
    });
    let tv_split = split_in_graph(g, tv.fused, &tv.mask, &rule, log)?;
    splits.push(SplitInfo {
        site: SPLIT_SITES[1],
        k_used: tv_split.k_used,
        spectrum: tv_split.spectrum.clone(),
    });

    let macro_cfg = MsinConfig::macro_level(cfg);
    let fc = msin_forward(g, &root.child("macro"), &macro_cfg, eps, ta_split.aligned, tv_split.aligned, &ta.mask, &tv.mask)?;
    let zc = split_in_graph(g, fc.fused, &fc.mask, &rule, log)?;
    splits.push(SplitInfo {
        site: SPLIT_SITES[2],
        k_used: zc.k_used,
        spectrum: zc.spectrum.clone(),
    });

    let head_in = match cfg.main_input {
        MainInput::ZcAligned => zc.aligned,
        MainInput::Fused => fc.fused,
    };
    let pooled = g.mean_rows(head_in, &fc.mask)?;
    let y_main = FfnParams::bind(&root.child("head").child("main"))?.forward(g, pooled)?;

    let mut vars = BTreeMap::from([
        ("F_t", f_t),
        ("F_v", f_v),
        ("F_a", f_a),
        ("F_ta", ta.fused),
        ("F_tv", tv.fused),
        ("F_ta_aligned", ta_split.aligned),
        ("F_ta_conflict", ta_split.conflict),
        ("F_tv_aligned", tv_split.aligned),
        ("F_tv_conflict", tv_split.conflict),
        ("Z_c_aligned", zc.aligned),
        ("Z_c_conflict", zc.conflict),
        ("y_main", y_main),
    ]);

    let (branch, losses) = if cfg.conflict_branch {
        let inputs = BranchInputs {
            f_t,
            f_v,
            f_a,
            ta_conflict: ta_split.conflict,
            tv_conflict: tv_split.conflict,
            ta_aligned: ta_split.aligned,
            tv_aligned: tv_split.aligned,
            zc_conflict: zc.conflict,
            mask_t: &s.mask_t,
            mask_v: &s.mask_v,
            mask_a: &s.mask_a,
            mask_ta: &ta.mask,
            mask_tv: &tv.mask,
            mask_c: &fc.mask,
        };
        let b = build_conflict_features(g, &root.child("cmb"), &inputs)?;
        vars.extend([
            ("F_t_prime", b.f_t_prime),
            ("F_v_prime", b.f_v_prime),
            ("F_a_prime", b.f_a_prime),
            ("F_tv_dprime", b.f_tv_dprime),
            ("F_ta_dprime", b.f_ta_dprime),
            ("y_t", b.y_t),
            ("y_v", b.y_v),
            ("y_a", b.y_a),
            ("y_tv", b.y_tv),
            ("y_ta", b.y_ta),
        ]);
        let l = branch_losses(g, &b)?;
        (Some(b), Some(l))
    } else {
        (None, None)
    };

    let masks = BTreeMap::from([
        ("t", s.mask_t.clone()),
        ("v", s.mask_v.clone()),
        ("a", s.mask_a.clone()),
        ("ta", concat_mask(&s.mask_t, &s.mask_a)),
        ("tv", concat_mask(&s.mask_t, &s.mask_v)),
        ("c", fc.mask),
    ]);
    Ok(SampleForward {
        y_main,
        branch,
        losses,
        vars,
        masks,
        splits,
    })
}
