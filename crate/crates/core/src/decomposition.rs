//! Aligned/conflict split of a fused representation by truncated SVD.
//!
//! For `F = U Σ Vᵀ` with `h = min(m, n)` singular values, the aligned
//! constituent keeps the top `k` triplets and the conflict constituent
//! keeps the remaining `h - k`. `k` is clamped to `[1, h - 1]` so that
//! neither side is structurally empty.
//!
//! Inside a [`Graph`] the singular subspaces are constants of the forward
//! pass: `aligned = U_k U_kᵀ F V_k V_kᵀ` and `conflict = F - aligned`, so
//! the backward pass propagates through these fixed projections only.
//! Gradient checks replay the recorded subspaces through [`SubspaceLog`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{svd, Graph, Tensor, Var};

/// How many singular triplets go to the aligned constituent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruncationRule {
    /// Fixed rank; overrides `ratio` and `cap` when set.
    pub k: Option<usize>,
    /// Fraction of `h` used when no fixed rank is given.
    pub ratio: f64,
    /// Rank used once `h` exceeds it.
    pub cap: usize,
}

impl Default for TruncationRule {
    fn default() -> Self {
        Self { k: None, ratio: 0.6, cap: 44 }
    }
}

impl TruncationRule {
    pub fn fixed(k: usize) -> Self {
        Self { k: Some(k), ..Self::default() }
    }

    /// Requested rank for a spectrum of length `h`, before clamping.
    pub fn requested(&self, h: usize) -> usize {
        match self.k {
            Some(k) => k,
            None if h > self.cap => self.cap,
            None => (self.ratio * h as f64).ceil() as usize,
        }
    }

    pub fn resolve(&self, h: usize) -> usize {
        clamp_k(self.requested(h), h)
    }
}

/// `k` clamped to `[1, h - 1]`.
pub fn clamp_k(k: usize, h: usize) -> usize {
    k.min(h.saturating_sub(1)).max(1)
}

#[derive(Clone, Debug)]
pub struct SplitResult {
    pub aligned: Tensor,
    pub conflict: Tensor,
    pub k_used: usize,
    pub spectrum: Tensor,
}

/// Splits `f` into its top-`k` and residual reconstructions.
pub fn split_aligned_conflict(f: &Tensor, k: usize) -> Result<SplitResult> {
    let (m, n) = f.dims2()?;
    if m < 2 || n < 2 {
        return Err(Error::shape("split_aligned_conflict", format!("need at least 2x2, got {m}x{n}")));
    }
    if k == 0 {
        return Err(Error::shape("split_aligned_conflict", "k must be at least 1"));
    }
    let dec = svd(f)?;
    let h = dec.rank_h();
    let k_used = clamp_k(k, h);
    Ok(SplitResult {
        aligned: dec.reconstruct(0..k_used),
        conflict: dec.reconstruct(k_used..h),
        k_used,
        spectrum: dec.s,
    })
}

/// Frobenius norm of the conflict constituent for each requested `k`,
/// paired with the clamped rank actually used.
pub fn conflict_norm_sweep(f: &Tensor, ks: &[usize]) -> Result<Vec<(usize, f64)>> {
    ks.iter()
        .map(|&k| split_aligned_conflict(f, k).map(|s| (s.k_used, s.conflict.frobenius_norm())))
        .collect()
}

/// Subspaces captured at one split site.
#[derive(Clone, Debug)]
pub struct FrozenSubspace {
    /// `m×k`, zero on masked rows.
    pub u_k: Tensor,
    /// `n×k`
    pub v_k: Tensor,
    pub k_used: usize,
    pub spectrum: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum LogMode {
    Record,
    Replay,
}

/// Sequence of split sites visited by a forward pass. In record mode each
/// split computes a fresh SVD and appends its subspaces; in replay mode the
/// splits reuse the recorded subspaces in visiting order.
#[derive(Clone, Debug)]
pub struct SubspaceLog {
    mode: LogMode,
    entries: Vec<FrozenSubspace>,
    cursor: usize,
}

impl Default for SubspaceLog {
    fn default() -> Self {
        Self::record()
    }
}

impl SubspaceLog {
    pub fn record() -> Self {
        Self {
            mode: LogMode::Record,
            entries: Vec::new(),
            cursor: 0,
        }
    }

    /// Switches a recorded log to replay from the first site.
    pub fn into_replay(mut self) -> Self {
        self.mode = LogMode::Replay;
        self.cursor = 0;
        self
    }

    pub fn rewind(&mut self) {
        self.cursor = 0;
    }

    pub fn entries(&self) -> &[FrozenSubspace] {
        &self.entries
    }

    fn next(&mut self, f: &[f64], m: usize, n: usize, mask: &[bool], rule: &TruncationRule) -> Result<FrozenSubspace> {
        match self.mode {
            LogMode::Record => {
                let s = compute_subspace(f, m, n, mask, rule)?;
                self.entries.push(s.clone());
                Ok(s)
            }
            LogMode::Replay => {
                let s = self
                    .entries
                    .get(self.cursor)
                    .cloned()
                    .ok_or_else(|| Error::Graph("subspace replay ran past the recorded splits".into()))?;
                if s.u_k.rows() != m || s.v_k.rows() != n {
                    return Err(Error::Graph(format!(
                        "subspace replay shape mismatch at site {}: recorded {}x{}, got {m}x{n}",
                        self.cursor,
                        s.u_k.rows(),
                        s.v_k.rows()
                    )));
                }
                self.cursor += 1;
                Ok(s)
            }
        }
    }
}

fn compute_subspace(f: &[f64], m: usize, n: usize, mask: &[bool], rule: &TruncationRule) -> Result<FrozenSubspace> {
    let valid: Vec<usize> = (0..m).filter(|&i| mask[i]).collect();
    let mv = valid.len();
    if mv < 2 || n < 2 {
        return Err(Error::shape("split", format!("need at least 2 valid rows and 2 columns, got {mv}x{n}")));
    }
    let mut sub = Vec::with_capacity(mv * n);
    for &i in &valid {
        sub.extend_from_slice(&f[i * n..(i + 1) * n]);
    }
    let dec = svd(&Tensor::matrix(mv, n, sub)?)?;
    let h = dec.rank_h();
    let k = rule.resolve(h);
    let mut u_k = vec![0.0; m * k];
    for (r, &i) in valid.iter().enumerate() {
        for t in 0..k {
            u_k[i * k + t] = dec.u.get(r, t);
        }
    }
    let mut v_k = vec![0.0; n * k];
    for t in 0..k {
        for j in 0..n {
            v_k[j * k + t] = dec.vt.get(t, j);
        }
    }
    Ok(FrozenSubspace {
        u_k: Tensor::matrix(m, k, u_k)?,
        v_k: Tensor::matrix(n, k, v_k)?,
        k_used: k,
        spectrum: dec.s.into_data(),
    })
}

pub struct GraphSplit {
    pub aligned: Var,
    pub conflict: Var,
    pub k_used: usize,
    pub spectrum: Vec<f64>,
}

/// Aligned/conflict split of `f` inside a graph. Only rows with `mask`
/// set take part in the SVD; masked rows of both outputs are zero.
pub fn split_in_graph(g: &mut Graph, f: Var, mask: &[bool], rule: &TruncationRule, log: &mut SubspaceLog) -> Result<GraphSplit> {
    let (m, n) = g.dims(f);
    if mask.len() != m {
        return Err(Error::shape("split", format!("mask of {} for {m} rows", mask.len())));
    }
    let sub = log.next(g.data(f), m, n, mask, rule)?;
    let u = g.constant(&sub.u_k)?;
    let v = g.constant(&sub.v_k)?;
    let core = g.matmul_tn(u, f)?; // k×n
    let core = g.matmul(core, v)?; // k×k
    let left = g.matmul(u, core)?; // m×k
    let aligned = g.matmul_nt(left, v)?; // m×n
    let conflict = g.sub(f, aligned)?;
    Ok(GraphSplit {
        aligned,
        conflict,
        k_used: sub.k_used,
        spectrum: sub.spectrum,
    })
}
