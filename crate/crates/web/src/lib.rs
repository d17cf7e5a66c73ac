//! WebAssembly bindings for the demo page in `www/`.
//!
//! Every entry point takes and returns JSON text. The builders in this
//! module are plain Rust so they can be tested natively; the
//! `#[wasm_bindgen]` wrappers only convert errors into JS exceptions.

use mcan_core::attention::{cross_attention_detailed, AttentionParams, MsinConfig};
use mcan_core::data::{generate_synthetic, Modality, SynthConfig};
use mcan_core::decomposition::split_aligned_conflict;
use mcan_core::params::{McanParams, ParamSpecs};
use mcan_core::tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

pub type DemoResult = std::result::Result<Value, String>;

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// Splits a JSON matrix (list of rows) at rank `k`.
pub fn split_json(matrix: &str, k: usize) -> DemoResult {
    let data: Vec<Vec<f64>> = serde_json::from_str(matrix).map_err(|e| format!("matrix: {e}"))?;
    let f = Tensor::from_rows(&data).map_err(|e| e.to_string())?;
    let s = split_aligned_conflict(&f, k).map_err(|e| e.to_string())?;
    Ok(json!({
        "k_used": s.k_used,
        "spectrum": s.spectrum.data(),
        "input_norm": f.frobenius_norm(),
        "aligned_norm": s.aligned.frobenius_norm(),
        "conflict_norm": s.conflict.frobenius_norm(),
        "aligned": rows(&s.aligned),
        "conflict": rows(&s.conflict),
    }))
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionRequest {
    pub queries: usize,
    /// Real keys; the rest up to `padded_keys` are zero rows masked out.
    pub keys: usize,
    pub padded_keys: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub d: usize,
    pub seed: u64,
}

impl Default for AttentionRequest {
    fn default() -> Self {
        Self {
            queries: 6,
            keys: 5,
            padded_keys: 8,
            heads: 2,
            head_dim: 4,
            d: 8,
            seed: 0,
        }
    }
}

#[derive(Serialize)]
struct AttentionMap {
    key_mask: Vec<bool>,
    /// Per head, `queries` rows of `padded_keys` weights.
    heads: Vec<Vec<Vec<f64>>>,
}

/// Attention weights of random queries over a padded, masked key set.
pub fn attention_json(request: &str) -> DemoResult {
    let req: AttentionRequest = serde_json::from_str(request).map_err(|e| format!("request: {e}"))?;
    if req.queries == 0 || req.keys == 0 || req.keys > req.padded_keys || req.padded_keys > 64 || req.queries > 64 {
        return Err("need 1 <= keys <= padded_keys <= 64 and 1 <= queries <= 64".into());
    }
    let cfg = MsinConfig {
        layers: 1,
        heads: req.heads,
        model_dim: req.d,
        head_dim: req.head_dim,
        ffn_hidden: 1,
    };
    let mut specs = ParamSpecs::new();
    AttentionParams::declare(&mut specs, &cfg);
    let params = McanParams::init(&specs, req.seed);

    let mut rng = ChaCha8Rng::seed_from_u64(req.seed.wrapping_add(1));
    let mut random = |n: usize| -> Vec<f64> { (0..n * req.d).map(|_| rng.random_range(-2.0..2.0)).collect() };
    let q = Tensor::matrix(req.queries, req.d, random(req.queries)).map_err(|e| e.to_string())?;
    let mut kv = random(req.keys);
    kv.resize(req.padded_keys * req.d, 0.0);
    let kv = Tensor::matrix(req.padded_keys, req.d, kv).map_err(|e| e.to_string())?;
    let key_mask: Vec<bool> = (0..req.padded_keys).map(|j| j < req.keys).collect();

    let run = || -> mcan_core::Result<Vec<Vec<Vec<f64>>>> {
        let mut g = Graph::new();
        let bound = params.bind(&mut g)?;
        let p = AttentionParams::bind(&bound.scope())?;
        let (qv, kvv) = (g.constant(&q)?, g.constant(&kv)?);
        let att = cross_attention_detailed(&mut g, &p, qv, kvv, &key_mask, req.heads, req.head_dim)?;
        Ok(att.weights.iter().map(|w| rows(&g.value(*w))).collect())
    };
    let heads = run().map_err(|e| e.to_string())?;
    serde_json::to_value(AttentionMap { key_mask, heads }).map_err(|e| e.to_string())
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthRequest {
    pub n: usize,
    pub conflict_prob: f64,
    pub bimodal_conflict_prob: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthRequest {
    fn default() -> Self {
        Self {
            n: 12,
            conflict_prob: 0.3,
            bimodal_conflict_prob: 0.2,
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

/// Per-sample label, conflict tags and the sentiment each modality carries,
/// read back from the mean row through the modality's code.
pub fn synth_json(request: &str) -> DemoResult {
    let req: SynthRequest = serde_json::from_str(request).map_err(|e| format!("request: {e}"))?;
    if req.n == 0 || req.n > 500 {
        return Err("n must be in 1..=500".into());
    }
    let cfg = SynthConfig {
        n_samples: req.n,
        conflict_prob: req.conflict_prob,
        bimodal_conflict_prob: req.bimodal_conflict_prob,
        noise_sigma: req.noise_sigma,
        seed: req.seed,
        ..SynthConfig::default()
    };
    let ds = generate_synthetic(&cfg).map_err(|e| e.to_string())?;
    let decode = |t: &Tensor, code: &[f64]| {
        let mean: f64 = (0..t.rows()).map(|r| t.row(r).iter().zip(code).map(|(x, c)| x * c).sum::<f64>()).sum::<f64>();
        3.0 * mean / t.rows() as f64
    };
    let name = |m: Option<Modality>| m.map(|m| serde_json::to_value(m).expect("enum serialises"));
    let samples: Vec<Value> = ds
        .samples
        .iter()
        .zip(&ds.tags)
        .map(|(s, tag)| {
            json!({
                "id": s.id,
                "label": s.label,
                "unimodal": name(tag.unimodal),
                "bimodal": name(tag.bimodal),
                "carried": {
                    "text": decode(&s.text_seq, &ds.codes[0]),
                    "visual": decode(&s.visual_seq, &ds.codes[1]),
                    "audio": decode(&s.audio_seq, &ds.codes[2]),
                },
            })
        })
        .collect();
    Ok(json!({ "samples": samples }))
}

fn to_js(r: DemoResult) -> std::result::Result<String, JsValue> {
    r.map(|v| v.to_string()).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn split(matrix: &str, k: usize) -> std::result::Result<String, JsValue> {
    to_js(split_json(matrix, k))
}

#[wasm_bindgen]
pub fn attention(request: &str) -> std::result::Result<String, JsValue> {
    to_js(attention_json(request))
}

#[wasm_bindgen]
pub fn synth(request: &str) -> std::result::Result<String, JsValue> {
    to_js(synth_json(request))
}
