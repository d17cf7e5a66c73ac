//! Conflict-modeling branch: Micro-/Macro-CACA attention over the conflict
//! constituents, five prediction heads, and the discrepancy losses.
//!
//! A CACA is single-head attention whose query comes from a conflict
//! constituent and whose key/value come from a unimodal (micro) or aligned
//! bimodal (macro) representation:
//! `softmax(Q W_Q (K W_K)ᵀ / sqrt(d_c)) K W_V`, with `W_Q, W_K: d×d_c` and
//! `W_V: d×d`. Key/value weights belong to the key source and are shared
//! by every CACA reading it; each CACA has its own query weights.
//!
//! Outputs are mean-pooled over valid query rows, giving width-`d` vectors
//! `F_t'`, `F_v'`, `F_a'`, `F_tv''`, `F_ta''`.

use crate::attention::FfnParams;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{Init, ParamSpecs, Scope};
use crate::tensor::{Graph, Var};

/// Query-side weights of the four micro and two macro CACAs.
pub const MICRO_QUERIES: [&str; 4] = ["t_from_tv", "t_from_ta", "v", "a"];
pub const MACRO_SOURCES: [&str; 2] = ["tv", "ta"];
pub const HEADS: [&str; 5] = ["t", "v", "a", "tv", "ta"];

#[derive(Clone, Copy, Debug)]
pub struct KeyValueParams {
    /// `d×d_c`
    pub wk: Var,
    /// `d×d`
    pub wv: Var,
}

impl KeyValueParams {
    pub fn declare(specs: &mut ParamSpecs, d: usize, dc: usize) {
        specs.add("wk", &[d, dc], Init::Xavier);
        specs.add("wv", &[d, d], Init::Xavier);
    }

    pub fn bind(scope: &Scope) -> Result<Self> {
        Ok(Self {
            wk: scope.var("wk")?,
            wv: scope.var("wv")?,
        })
    }
}

/// Declares everything under the `cmb` scope.
pub fn declare_conflict_branch(specs: &mut ParamSpecs, cfg: &ModelConfig) {
    let (d, dc) = (cfg.d, cfg.head_dim);
    specs.scoped("cmb", |s| {
        s.scoped("caca", |s| {
            s.scoped("kv", |s| {
                for m in ["t", "v", "a"] {
                    s.scoped(m, |s| KeyValueParams::declare(s, d, dc));
                }
            });
            s.scoped("q", |s| {
                for name in MICRO_QUERIES {
                    s.add(name, &[d, dc], Init::Xavier);
                }
            });
        });
        s.scoped("macro", |s| {
            s.scoped("kv", |s| {
                for m in MACRO_SOURCES {
                    s.scoped(m, |s| KeyValueParams::declare(s, d, dc));
                }
            });
            s.scoped("q", |s| {
                for m in MACRO_SOURCES {
                    s.add(m, &[d, dc], Init::Xavier);
                }
            });
        });
        s.scoped("head", |s| {
            for h in HEADS {
                s.scoped(h, |s| FfnParams::declare(s, d, cfg.ffn_hidden, 1));
            }
        });
    });
}

/// Conflict-aware cross attention; returns `m×d` for an `m`-row query.
pub fn caca(g: &mut Graph, wq: Var, kv: &KeyValueParams, query: Var, source: Var, key_mask: &[bool]) -> Result<Var> {
    let (_, dq) = g.dims(query);
    let (n, ds) = g.dims(source);
    if dq != ds {
        return Err(Error::shape("caca", format!("query width {dq}, source width {ds}")));
    }
    if key_mask.len() != n {
        return Err(Error::shape("caca", format!("key mask {} for {n} keys", key_mask.len())));
    }
    let dc = g.dims(wq).1;
    let q = g.matmul(query, wq)?;
    let k = g.matmul(source, kv.wk)?;
    let v = g.matmul(source, kv.wv)?;
    let scores = g.matmul_nt(q, k)?;
    let scores = g.scale(scores, 1.0 / (dc as f64).sqrt())?;
    let a = g.softmax_rows(scores, Some(key_mask))?;
    g.matmul(a, v)
}

/// Graph inputs to the conflict branch for one sample.
pub struct BranchInputs<'a> {
    pub f_t: Var,
    pub f_v: Var,
    pub f_a: Var,
    pub ta_conflict: Var,
    pub tv_conflict: Var,
    pub ta_aligned: Var,
    pub tv_aligned: Var,
    pub zc_conflict: Var,
    pub mask_t: &'a [bool],
    pub mask_v: &'a [bool],
    pub mask_a: &'a [bool],
    /// Rows of `F_ta` (text then audio).
    pub mask_ta: &'a [bool],
    /// Rows of `F_tv` (text then visual).
    pub mask_tv: &'a [bool],
    /// Rows of the macro fusion (`F_ta` rows then `F_tv` rows).
    pub mask_c: &'a [bool],
}

/// Pooled conflict-fused vectors (`1×d` each) and branch predictions.
#[derive(Clone, Copy, Debug)]
pub struct BranchVars {
    pub f_t_prime: Var,
    pub f_v_prime: Var,
    pub f_a_prime: Var,
    pub f_tv_dprime: Var,
    pub f_ta_dprime: Var,
    pub y_t: Var,
    pub y_v: Var,
    pub y_a: Var,
    pub y_tv: Var,
    pub y_ta: Var,
}

/// Runs the four micro CACAs, the two macro CACAs and the five heads.
/// `scope` is the `cmb` scope.
pub fn build_conflict_features(g: &mut Graph, scope: &Scope, x: &BranchInputs) -> Result<BranchVars> {
    let caca_s = scope.child("caca");
    let kv_s = caca_s.child("kv");
    let q_s = caca_s.child("q");
    let kv_t = KeyValueParams::bind(&kv_s.child("t"))?;
    let kv_v = KeyValueParams::bind(&kv_s.child("v"))?;
    let kv_a = KeyValueParams::bind(&kv_s.child("a"))?;

    let t_tv = caca(g, q_s.var("t_from_tv")?, &kv_t, x.tv_conflict, x.f_t, x.mask_t)?;
    let t_tv = g.mean_rows(t_tv, x.mask_tv)?;
    let t_ta = caca(g, q_s.var("t_from_ta")?, &kv_t, x.ta_conflict, x.f_t, x.mask_t)?;
    let t_ta = g.mean_rows(t_ta, x.mask_ta)?;
    let both = g.add(t_tv, t_ta)?;
    let f_t_prime = g.scale(both, 0.5)?;

    let v = caca(g, q_s.var("v")?, &kv_v, x.tv_conflict, x.f_v, x.mask_v)?;
    let f_v_prime = g.mean_rows(v, x.mask_tv)?;
    let a = caca(g, q_s.var("a")?, &kv_a, x.ta_conflict, x.f_a, x.mask_a)?;
    let f_a_prime = g.mean_rows(a, x.mask_ta)?;

    let macro_s = scope.child("macro");
    let kv_ta = KeyValueParams::bind(&macro_s.child("kv").child("ta"))?;
    let kv_tv = KeyValueParams::bind(&macro_s.child("kv").child("tv"))?;
    let ta = caca(g, macro_s.child("q").var("ta")?, &kv_ta, x.zc_conflict, x.ta_aligned, x.mask_ta)?;
    let f_ta_dprime = g.mean_rows(ta, x.mask_c)?;
    let tv = caca(g, macro_s.child("q").var("tv")?, &kv_tv, x.zc_conflict, x.tv_aligned, x.mask_tv)?;
    let f_tv_dprime = g.mean_rows(tv, x.mask_c)?;

    let head_s = scope.child("head");
    let mut head = |name: &str, f: Var| -> Result<Var> { FfnParams::bind(&head_s.child(name))?.forward(g, f) };
    Ok(BranchVars {
        y_t: head("t", f_t_prime)?,
        y_v: head("v", f_v_prime)?,
        y_a: head("a", f_a_prime)?,
        y_tv: head("tv", f_tv_dprime)?,
        y_ta: head("ta", f_ta_dprime)?,
        f_t_prime,
        f_v_prime,
        f_a_prime,
        f_tv_dprime,
        f_ta_dprime,
    })
}

/// The four discrepancy losses of one sample, as graph scalars.
#[derive(Clone, Copy, Debug)]
pub struct BranchLosses {
    pub oc_micro: Var,
    pub oc_macro: Var,
    pub diff_micro: Var,
    pub diff_macro: Var,
}

/// Sum over ordered pairs `p != q` of `(f_p · f_q)^2`.
pub fn orthogonality_loss_micro_graph(g: &mut Graph, f: [Var; 3]) -> Result<Var> {
    let mut terms = Vec::with_capacity(3);
    for (p, q) in [(0, 1), (0, 2), (1, 2)] {
        let d = g.dot(f[p], f[q])?;
        terms.push(g.square(d)?);
    }
    let s = g.concat_cols(&terms)?;
    let s = g.sum(s)?;
    g.scale(s, 2.0)
}

/// Sum over ordered pairs `p != q` of `(y_p - y_q)^2`.
pub fn diff_loss_micro_graph(g: &mut Graph, y: [Var; 3]) -> Result<Var> {
    let mut terms = Vec::with_capacity(3);
    for (p, q) in [(0, 1), (0, 2), (1, 2)] {
        let d = g.sub(y[p], y[q])?;
        terms.push(g.square(d)?);
    }
    let s = g.concat_cols(&terms)?;
    let s = g.sum(s)?;
    g.scale(s, 2.0)
}

pub fn branch_losses(g: &mut Graph, b: &BranchVars) -> Result<BranchLosses> {
    let oc_micro = orthogonality_loss_micro_graph(g, [b.f_t_prime, b.f_v_prime, b.f_a_prime])?;
    let diff_micro = diff_loss_micro_graph(g, [b.y_t, b.y_v, b.y_a])?;
    let d = g.dot(b.f_tv_dprime, b.f_ta_dprime)?;
    let oc_macro = g.square(d)?;
    let d = g.sub(b.y_tv, b.y_ta)?;
    let diff_macro = g.square(d)?;
    Ok(BranchLosses {
        oc_micro,
        oc_macro,
        diff_micro,
        diff_macro,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Value-level micro orthogonality loss.
pub fn orthogonality_loss_micro(f_t: &[f64], f_v: &[f64], f_a: &[f64]) -> Result<f64> {
    if f_t.len() != f_v.len() || f_t.len() != f_a.len() {
        return Err(Error::shape("orthogonality_loss_micro", "vectors differ in width"));
    }
    let (tv, ta, va) = (dot(f_t, f_v), dot(f_t, f_a), dot(f_v, f_a));
    Ok(2.0 * (tv * tv + ta * ta + va * va))
}

pub fn diff_loss_micro(y_t: f64, y_v: f64, y_a: f64) -> f64 {
    let (a, b, c) = (y_t - y_v, y_t - y_a, y_v - y_a);
    2.0 * (a * a + b * b + c * c)
}

/// Value-level `(oc_macro, diff_macro)`.
pub fn macro_losses(f_tv: &[f64], f_ta: &[f64], y_tv: f64, y_ta: f64) -> Result<(f64, f64)> {
    if f_tv.len() != f_ta.len() {
        return Err(Error::shape("macro_losses", "vectors differ in width"));
    }
    let d = dot(f_tv, f_ta);
    Ok((d * d, (y_tv - y_ta) * (y_tv - y_ta)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::McanParams;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    #[allow(clippy::needless_range_loop)]
    fn oc_oracle(f: [&[f64]; 3]) -> f64 {
        let mut total = 0.0;
        for p in 0..3 {
            for q in 0..3 {
                if p != q {
                    let mut d = 0.0;
                    for i in 0..f[p].len() {
                        d += f[p][i] * f[q][i];
                    }
                    total += d * d;
                }
            }
        }
        total
    }

    fn diff_oracle(y: [f64; 3]) -> f64 {
        let mut total = 0.0;
        for p in 0..3 {
            for q in 0..3 {
                if p != q {
                    total += (y[p] - y[q]).powi(2);
                }
            }
        }
        total
    }

    #[test]
    fn orthogonality_closed_forms() {
        let e = |i: usize| {
            let mut v = vec![0.0; 3];
            v[i] = 1.0;
            v
        };
        assert_eq!(orthogonality_loss_micro(&e(0), &e(1), &e(2)).unwrap(), 0.0);
        let u = [0.6, 0.8, 0.0];
        assert!((orthogonality_loss_micro(&u, &u, &u).unwrap() - 6.0).abs() < 1e-12);
        assert!(orthogonality_loss_micro(&u, &u, &[1.0]).is_err());
    }

    #[test]
    fn diff_closed_forms() {
        assert_eq!(diff_loss_micro(0.7, 0.7, 0.7), 0.0);
        assert_eq!(diff_loss_micro(1.0, 2.0, 4.0), 28.0);
    }

    #[test]
    fn macro_closed_forms() {
        assert_eq!(macro_losses(&[1.0, 0.0], &[0.0, 1.0], 0.3, 0.3).unwrap(), (0.0, 0.0));
        let (oc, _) = macro_losses(&[0.6, 0.8], &[0.6, 0.8], 0.0, 1.0).unwrap();
        assert!((oc - 1.0).abs() < 1e-12);
    }

    #[test]
    fn losses_match_loop_oracles_and_are_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let f: Vec<Vec<f64>> = (0..3).map(|_| (0..7).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
            let y: [f64; 3] = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let oc = orthogonality_loss_micro(&f[0], &f[1], &f[2]).unwrap();
            assert!((oc - oc_oracle([&f[0], &f[1], &f[2]])).abs() <= 1e-12 * oc.max(1.0));
            assert!((oc - orthogonality_loss_micro(&f[2], &f[0], &f[1]).unwrap()).abs() <= 1e-12 * oc.max(1.0));
            let d = diff_loss_micro(y[0], y[1], y[2]);
            assert!((d - diff_oracle(y)).abs() <= 1e-12 * d.max(1.0));
            assert!((d - diff_loss_micro(y[1], y[2], y[0])).abs() <= 1e-12 * d.max(1.0));
        }
    }

    #[test]
    fn graph_losses_match_value_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut g = Graph::new();
        let fs: Vec<Tensor> = (0..3).map(|_| random(1, 5, &mut rng)).collect();
        let f: Vec<Var> = fs.iter().map(|t| g.constant(t).unwrap()).collect();
        let oc = orthogonality_loss_micro_graph(&mut g, [f[0], f[1], f[2]]).unwrap();
        let want = orthogonality_loss_micro(fs[0].data(), fs[1].data(), fs[2].data()).unwrap();
        assert!((g.scalar(oc) - want).abs() <= 1e-12 * want.max(1.0));
        let ys = [1.0, 2.0, 4.0].map(|v| g.constant(&Tensor::matrix(1, 1, vec![v]).unwrap()).unwrap());
        let d = diff_loss_micro_graph(&mut g, ys).unwrap();
        assert_eq!(g.scalar(d), 28.0);
    }

    fn kv_identity(g: &mut Graph, d: usize) -> KeyValueParams {
        KeyValueParams {
            wk: g.param(&Tensor::identity(d)).unwrap(),
            wv: g.param(&Tensor::identity(d)).unwrap(),
        }
    }

    #[test]
    fn single_key_returns_value_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::new();
        let kv = kv_identity(&mut g, 4);
        let wq = g.param(&Tensor::identity(4)).unwrap();
        let q = g.constant(&random(6, 4, &mut rng)).unwrap();
        let src = random(1, 4, &mut rng);
        let s = g.constant(&src).unwrap();
        let out = caca(&mut g, wq, &kv, q, s, &[true]).unwrap();
        let out = g.value(out);
        for r in 0..6 {
            assert_eq!(out.row(r), src.row(0));
        }
    }

    #[test]
    fn zero_query_weights_average_valid_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut g = Graph::new();
        let kv = kv_identity(&mut g, 8);
        let wq = g.param(&Tensor::zeros(&[8, 8])).unwrap();
        let q = g.constant(&random(12, 8, &mut rng)).unwrap();
        let src = random(5, 8, &mut rng);
        let s = g.constant(&src).unwrap();
        let mask = [true, true, false, true, false];
        let out = caca(&mut g, wq, &kv, q, s, &mask).unwrap();
        let out = g.value(out);
        assert_eq!(out.shape(), &[12, 8]);
        for c in 0..8 {
            let mean = (src.get(0, c) + src.get(1, c) + src.get(3, c)) / 3.0;
            for r in 0..12 {
                assert!((out.get(r, c) - mean).abs() < 1e-12);
            }
        }
    }

    fn cfg() -> ModelConfig {
        ModelConfig {
            d: 6,
            head_dim: 3,
            ffn_hidden: 5,
            ..ModelConfig::default()
        }
    }

    struct Fixture {
        params: McanParams,
        tensors: Vec<Tensor>,
        masks: [Vec<bool>; 6],
    }

    fn fixture(seed: u64) -> Fixture {
        let mut specs = ParamSpecs::new();
        declare_conflict_branch(&mut specs, &cfg());
        let params = McanParams::init(&specs, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let (nt, nv, na) = (3, 4, 2);
        let tensors = vec![
            random(nt, 6, &mut rng),
            random(nv, 6, &mut rng),
            random(na, 6, &mut rng),
            random(nt + na, 6, &mut rng),
            random(nt + nv, 6, &mut rng),
            random(nt + na, 6, &mut rng),
            random(nt + nv, 6, &mut rng),
            random(2 * nt + na + nv, 6, &mut rng),
        ];
        let masks = [
            vec![true; nt],
            vec![true; nv],
            vec![true; na],
            vec![true; nt + na],
            vec![true; nt + nv],
            vec![true; 2 * nt + na + nv],
        ];
        Fixture { params, tensors, masks }
    }

    fn run(g: &mut Graph, fx: &Fixture) -> (BranchVars, Vec<Var>) {
        let bound = fx.params.bind(g).unwrap();
        let v: Vec<Var> = fx.tensors.iter().map(|t| g.param(t).unwrap()).collect();
        let m = &fx.masks;
        let inputs = BranchInputs {
            f_t: v[0],
            f_v: v[1],
            f_a: v[2],
            ta_conflict: v[3],
            tv_conflict: v[4],
            ta_aligned: v[5],
            tv_aligned: v[6],
            zc_conflict: v[7],
            mask_t: &m[0],
            mask_v: &m[1],
            mask_a: &m[2],
            mask_ta: &m[3],
            mask_tv: &m[4],
            mask_c: &m[5],
        };
        let b = build_conflict_features(g, &bound.scope().child("cmb"), &inputs).unwrap();
        (b, v)
    }

    #[test]
    fn prediction_head_closed_forms() {
        let mut specs = ParamSpecs::new();
        FfnParams::declare(&mut specs, 1, 1, 1);
        let mut params = McanParams::init(&specs, 0);
        let x = Tensor::matrix(1, 1, vec![0.8]).unwrap();
        for name in ["w1", "w2"] {
            *params.get_mut(name).unwrap() = Tensor::zeros(&[1, 1]);
        }
        let mut g = Graph::new();
        let bound = params.bind(&mut g).unwrap();
        let xv = g.constant(&x).unwrap();
        let y = FfnParams::bind(&bound.scope()).unwrap().forward(&mut g, xv).unwrap();
        assert_eq!(g.scalar(y), 0.0);

        *params.get_mut("w1").unwrap() = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        *params.get_mut("w2").unwrap() = Tensor::matrix(1, 1, vec![2.0]).unwrap();
        *params.get_mut("b2").unwrap() = Tensor::vector(vec![-0.5]).unwrap();
        let mut g = Graph::new();
        let bound = params.bind(&mut g).unwrap();
        let xv = g.constant(&x).unwrap();
        let y = FfnParams::bind(&bound.scope()).unwrap().forward(&mut g, xv).unwrap();
        let v: f64 = 0.8;
        let gelu = 0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh());
        assert!((g.scalar(y) - (2.0 * gelu - 0.5)).abs() < 1e-14);
    }

    #[test]
    fn five_pooled_vectors_of_width_d() {
        let fx = fixture(1);
        let mut g = Graph::new();
        let (b, _) = run(&mut g, &fx);
        for f in [b.f_t_prime, b.f_v_prime, b.f_a_prime, b.f_tv_dprime, b.f_ta_dprime] {
            assert_eq!(g.dims(f), (1, 6));
        }
        for y in [b.y_t, b.y_v, b.y_a, b.y_tv, b.y_ta] {
            assert_eq!(g.dims(y), (1, 1));
        }
    }

    #[test]
    fn uniform_attention_ignores_query_order() {
        let mut fx = fixture(2);
        for name in MICRO_QUERIES {
            *fx.params.get_mut(&format!("cmb.caca.q.{name}")).unwrap() = Tensor::zeros(&[6, 3]);
        }
        let mut g = Graph::new();
        let (b, _) = run(&mut g, &fx);
        let before = [g.value(b.f_t_prime), g.value(b.f_v_prime)];
        let tv = &fx.tensors[4];
        let rows: Vec<Vec<f64>> = (0..tv.rows()).rev().map(|r| tv.row(r).to_vec()).collect();
        fx.tensors[4] = Tensor::from_rows(&rows).unwrap();
        let mut g = Graph::new();
        let (b, _) = run(&mut g, &fx);
        let after = [g.value(b.f_t_prime), g.value(b.f_v_prime)];
        for (x, y) in before.iter().zip(&after) {
            assert!(x.sub(y).unwrap().frobenius_norm() < 1e-12);
        }
    }

    #[test]
    fn twin_text_outputs_average_to_either() {
        let mut fx = fixture(3);
        let q = fx.params.get("cmb.caca.q.t_from_tv").unwrap().clone();
        *fx.params.get_mut("cmb.caca.q.t_from_ta").unwrap() = q;
        fx.tensors[3] = fx.tensors[4].clone();
        fx.tensors[5] = fx.tensors[6].clone();
        fx.masks[3] = fx.masks[4].clone();
        let mut g = Graph::new();
        let bound = fx.params.bind(&mut g).unwrap();
        let s = bound.scope().child("cmb");
        let kv = KeyValueParams::bind(&s.child("caca").child("kv").child("t")).unwrap();
        let wq = s.child("caca").child("q").var("t_from_tv").unwrap();
        let ft = g.constant(&fx.tensors[0]).unwrap();
        let c = g.constant(&fx.tensors[4]).unwrap();
        let one = caca(&mut g, wq, &kv, c, ft, &fx.masks[0]).unwrap();
        let one = g.mean_rows(one, &fx.masks[4]).unwrap();
        let one = g.value(one);
        let (b, _) = run(&mut g, &fx);
        assert!(g.value(b.f_t_prime).sub(&one).unwrap().frobenius_norm() < 1e-12);
    }

    #[test]
    fn branch_gradients_match_finite_differences() {
        let fx = fixture(4);
        let loss_of = |fx: &Fixture| -> f64 {
            let mut g = Graph::new();
            let (b, _) = run(&mut g, fx);
            let l = branch_losses(&mut g, &b).unwrap();
            let parts = [l.oc_micro, l.oc_macro, l.diff_micro, l.diff_macro, b.y_t];
            let cat = g.concat_cols(&parts).unwrap();
            let s = g.sum(cat).unwrap();
            g.scalar(s)
        };
        let mut g = Graph::new();
        let (b, v) = run(&mut g, &fx);
        let l = branch_losses(&mut g, &b).unwrap();
        let cat = g.concat_cols(&[l.oc_micro, l.oc_macro, l.diff_micro, l.diff_macro, b.y_t]).unwrap();
        let s = g.sum(cat).unwrap();
        g.backward(s).unwrap();
        let h = 1e-6;
        for (i, var) in v.iter().enumerate() {
            let grad = g.grad(*var).unwrap();
            for j in 0..fx.tensors[i].numel() {
                let mut p = Fixture {
                    params: fx.params.clone(),
                    tensors: fx.tensors.clone(),
                    masks: fx.masks.clone(),
                };
                p.tensors[i].data_mut()[j] += h;
                let up = loss_of(&p);
                p.tensors[i].data_mut()[j] -= 2.0 * h;
                let down = loss_of(&p);
                let num = (up - down) / (2.0 * h);
                let ana = grad.data()[j];
                assert!((num - ana).abs() <= 1e-6 * num.abs().max(ana.abs()).max(1.0), "input {i}[{j}]: {ana} vs {num}");
            }
        }
    }
}
