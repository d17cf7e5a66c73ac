//! Cross-modal multi-head attention, Cross-Transformer layers and the
//! Multi-step Interaction Network (MSIN) stack.
//!
//! An MSIN takes two streams `x` (`n_x×d`) and `y` (`n_y×d`). Each layer
//! updates both streams in parallel: `x` queries `y` and `y` queries `x`,
//! each direction with its own weights, followed by the usual
//! residual/LayerNorm/FFN block. The final streams are stacked along time,
//! `x` first. The same layer type serves the Micro level (`F_t` with `F_a`
//! or `F_v`) and the Macro level (the two aligned bimodal constituents).

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{Init, ParamSpecs, Scope};
use crate::tensor::{Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MsinConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub head_dim: usize,
    pub ffn_hidden: usize,
}

impl MsinConfig {
    pub fn micro(cfg: &ModelConfig) -> Self {
        Self {
            layers: cfg.micro_layers,
            heads: cfg.heads,
            model_dim: cfg.d,
            head_dim: cfg.head_dim,
            ffn_hidden: cfg.ffn_hidden,
        }
    }

    pub fn macro_level(cfg: &ModelConfig) -> Self {
        Self {
            layers: cfg.macro_layers,
            ..Self::micro(cfg)
        }
    }

    /// Width of the concatenated heads, the input width of `W_O`.
    pub fn heads_width(&self) -> usize {
        self.heads * self.head_dim
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    /// `d×(e·d_k)`, one `d×d_k` block per head.
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    /// `(e·d_k)×d`
    pub wo: Var,
}

impl AttentionParams {
    pub fn declare(specs: &mut ParamSpecs, cfg: &MsinConfig) {
        let (d, w) = (cfg.model_dim, cfg.heads_width());
        specs.add("wq", &[d, w], Init::Xavier);
        specs.add("wk", &[d, w], Init::Xavier);
        specs.add("wv", &[d, w], Init::Xavier);
        specs.add("wo", &[w, d], Init::Xavier);
    }

    pub fn bind(scope: &Scope) -> Result<Self> {
        Ok(Self {
            wq: scope.var("wq")?,
            wk: scope.var("wk")?,
            wv: scope.var("wv")?,
            wo: scope.var("wo")?,
        })
    }
}

pub struct Attended {
    pub output: Var,
    /// Per-head `n_q×n_k` attention weights.
    pub weights: Vec<Var>,
}

/// Multi-head attention of `q_in` over `kv_in` with masked keys excluded.
pub fn cross_attention_detailed(
    g: &mut Graph,
    p: &AttentionParams,
    q_in: Var,
    kv_in: Var,
    key_mask: &[bool],
    heads: usize,
    head_dim: usize,
) -> Result<Attended> {
    let (_, dq) = g.dims(q_in);
    let (n_k, dk) = g.dims(kv_in);
    if dq != dk {
        return Err(Error::shape("cross_attention", format!("query width {dq}, key width {dk}")));
    }
    if key_mask.len() != n_k {
        return Err(Error::shape("cross_attention", format!("key mask {} for {n_k} keys", key_mask.len())));
    }
    let q = g.matmul(q_in, p.wq)?;
    let k = g.matmul(kv_in, p.wk)?;
    let v = g.matmul(kv_in, p.wv)?;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * head_dim, head_dim)?,
                g.slice_cols(k, h * head_dim, head_dim)?,
                g.slice_cols(v, h * head_dim, head_dim)?,
            )
        };
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, scale)?;
        let a = g.softmax_rows(scores, Some(key_mask))?;
        weights.push(a);
        outs.push(g.matmul(a, vh)?);
    }
    let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    let output = g.matmul(cat, p.wo)?;
    Ok(Attended { output, weights })
}

pub fn cross_attention(g: &mut Graph, p: &AttentionParams, q_in: Var, kv_in: Var, key_mask: &[bool], heads: usize, head_dim: usize) -> Result<Var> {
    Ok(cross_attention_detailed(g, p, q_in, kv_in, key_mask, heads, head_dim)?.output)
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gamma: Var,
    pub beta: Var,
}

impl LayerNormParams {
    pub fn declare(specs: &mut ParamSpecs, d: usize) {
        specs.add("gamma", &[d], Init::Ones);
        specs.add("beta", &[d], Init::Zeros);
    }

    pub fn bind(scope: &Scope) -> Result<Self> {
        Ok(Self {
            gamma: scope.var("gamma")?,
            beta: scope.var("beta")?,
        })
    }
}

/// Two-layer feed-forward block `gelu(x W1 + b1) W2 + b2`.
#[derive(Clone, Copy, Debug)]
pub struct FfnParams {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl FfnParams {
    pub fn declare(specs: &mut ParamSpecs, d_in: usize, hidden: usize, d_out: usize) {
        specs.add("w1", &[d_in, hidden], Init::Xavier);
        specs.add("b1", &[hidden], Init::Zeros);
        specs.add("w2", &[hidden, d_out], Init::Xavier);
        specs.add("b2", &[d_out], Init::Zeros);
    }

    pub fn bind(scope: &Scope) -> Result<Self> {
        Ok(Self {
            w1: scope.var("w1")?,
            b1: scope.var("b1")?,
            w2: scope.var("w2")?,
            b2: scope.var("b2")?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = g.matmul(x, self.w1)?;
        let h = g.add_row(h, self.b1)?;
        let h = g.gelu(h)?;
        let o = g.matmul(h, self.w2)?;
        g.add_row(o, self.b2)
    }
}

/// Parameters of one direction of a Cross-Transformer layer.
#[derive(Clone, Copy, Debug)]
pub struct StreamParams {
    pub attn: AttentionParams,
    pub ln1: LayerNormParams,
    pub ffn: FfnParams,
    pub ln2: LayerNormParams,
}

impl StreamParams {
    pub fn declare(specs: &mut ParamSpecs, cfg: &MsinConfig) {
        specs.scoped("attn", |s| AttentionParams::declare(s, cfg));
        specs.scoped("ln1", |s| LayerNormParams::declare(s, cfg.model_dim));
        specs.scoped("ffn", |s| FfnParams::declare(s, cfg.model_dim, cfg.ffn_hidden, cfg.model_dim));
        specs.scoped("ln2", |s| LayerNormParams::declare(s, cfg.model_dim));
    }

    pub fn bind(scope: &Scope) -> Result<Self> {
        Ok(Self {
            attn: AttentionParams::bind(&scope.child("attn"))?,
            ln1: LayerNormParams::bind(&scope.child("ln1"))?,
            ffn: FfnParams::bind(&scope.child("ffn"))?,
            ln2: LayerNormParams::bind(&scope.child("ln2"))?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CrossLayerParams {
    /// `x` queries `y`.
    pub x: StreamParams,
    /// `y` queries `x`.
    pub y: StreamParams,
}

impl CrossLayerParams {
    pub fn declare(specs: &mut ParamSpecs, cfg: &MsinConfig) {
        specs.scoped("x", |s| StreamParams::declare(s, cfg));
        specs.scoped("y", |s| StreamParams::declare(s, cfg));
    }

    pub fn bind(scope: &Scope) -> Result<Self> {
        Ok(Self {
            x: StreamParams::bind(&scope.child("x"))?,
            y: StreamParams::bind(&scope.child("y"))?,
        })
    }
}

#[allow(clippy::too_many_arguments)]
fn stream_update(g: &mut Graph, p: &StreamParams, cfg: &MsinConfig, eps: f64, query: Var, other: Var, query_mask: &[bool], other_mask: &[bool]) -> Result<Var> {
    let att = cross_attention(g, &p.attn, query, other, other_mask, cfg.heads, cfg.head_dim)?;
    let h = g.add(query, att)?;
    let h = g.layer_norm(h, p.ln1.gamma, p.ln1.beta, eps)?;
    let f = p.ffn.forward(g, h)?;
    let o = g.add(h, f)?;
    let o = g.layer_norm(o, p.ln2.gamma, p.ln2.beta, eps)?;
    g.mask_rows(o, query_mask)
}

/// One Cross-Transformer layer. Both directions read the layer inputs.
#[allow(clippy::too_many_arguments)]
pub fn cross_transformer_layer(
    g: &mut Graph,
    p: &CrossLayerParams,
    cfg: &MsinConfig,
    eps: f64,
    x: Var,
    y: Var,
    mask_x: &[bool],
    mask_y: &[bool],
) -> Result<(Var, Var)> {
    let d = cfg.model_dim;
    if g.dims(x).1 != d || g.dims(y).1 != d {
        return Err(Error::shape(
            "cross_transformer_layer",
            format!("widths {} and {}, model width {d}", g.dims(x).1, g.dims(y).1),
        ));
    }
    let x_next = stream_update(g, &p.x, cfg, eps, x, y, mask_x, mask_y)?;
    let y_next = stream_update(g, &p.y, cfg, eps, y, x, mask_y, mask_x)?;
    Ok((x_next, y_next))
}

pub struct MsinOutput {
    /// `(n_x + n_y)×d`, `x` stream first.
    pub fused: Var,
    pub mask: Vec<bool>,
}

pub fn declare_msin(specs: &mut ParamSpecs, cfg: &MsinConfig) {
    for l in 0..cfg.layers {
        specs.scoped(&format!("layer{l}"), |s| CrossLayerParams::declare(s, cfg));
    }
}

#[allow(clippy::too_many_arguments)]
pub fn msin_forward(g: &mut Graph, scope: &Scope, cfg: &MsinConfig, eps: f64, x: Var, y: Var, mask_x: &[bool], mask_y: &[bool]) -> Result<MsinOutput> {
    if cfg.layers == 0 {
        return Err(Error::Config("an MSIN needs at least one layer".into()));
    }
    let (mut xs, mut ys) = (x, y);
    for l in 0..cfg.layers {
        let p = CrossLayerParams::bind(&scope.child(&format!("layer{l}")))?;
        (xs, ys) = cross_transformer_layer(g, &p, cfg, eps, xs, ys, mask_x, mask_y)?;
    }
    let fused = g.concat_rows(&[xs, ys])?;
    let mask = mask_x.iter().chain(mask_y).copied().collect();
    Ok(MsinOutput { fused, mask })
}
