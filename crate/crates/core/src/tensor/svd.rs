//! Thin SVD by one-sided (Hestenes) Jacobi rotations.
//!
//! Output is deterministic for a given input: singular values are sorted
//! descending (ties keep column order) and each left singular vector is
//! signed so that its first nonzero entry is positive.

use super::Tensor;
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 80;

#[derive(Clone, Debug)]
pub struct SvdResult {
    /// `m×h` left singular vectors as columns.
    pub u: Tensor,
    /// `h` singular values, descending.
    pub s: Tensor,
    /// `h×n` right singular vectors as rows.
    pub vt: Tensor,
}

impl SvdResult {
    pub fn rank_h(&self) -> usize {
        self.s.numel()
    }

    /// `U_k Σ_k V_kᵀ` restricted to the singular triplets in `range`.
    pub fn reconstruct(&self, range: std::ops::Range<usize>) -> Tensor {
        let (m, h) = (self.u.rows(), self.rank_h());
        let n = self.vt.cols();
        let mut out = vec![0.0; m * n];
        for t in range {
            let s = self.s.data()[t];
            if s == 0.0 {
                continue;
            }
            for i in 0..m {
                let ui = self.u.data()[i * h + t] * s;
                if ui == 0.0 {
                    continue;
                }
                let row = &mut out[i * n..(i + 1) * n];
                for (o, v) in row.iter_mut().zip(&self.vt.data()[t * n..(t + 1) * n]) {
                    *o += ui * v;
                }
            }
        }
        Tensor::from_parts_unchecked(vec![m, n], out)
    }
}

pub fn svd(x: &Tensor) -> Result<SvdResult> {
    let (m, n) = x.dims2()?;
    if m == 0 || n == 0 {
        return Err(Error::shape("svd", format!("empty {m}x{n} matrix")));
    }
    if x.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "svd" });
    }
    if m >= n {
        let cols = columns(x.data(), m, n);
        let (u, s, v) = tall(cols, m, n)?;
        Ok(finish(u, s, v, m, n))
    } else {
        // Aᵀ = U' Σ V'ᵀ  =>  A = V' Σ U'ᵀ
        let cols = rows_as_columns(x.data(), m, n);
        let (u_t, s, v_t) = tall(cols, n, m)?;
        Ok(finish(v_t, s, u_t, m, n))
    }
}

fn columns(a: &[f64], m: usize, n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|j| (0..m).map(|i| a[i * n + j]).collect()).collect()
}

fn rows_as_columns(a: &[f64], m: usize, n: usize) -> Vec<Vec<f64>> {
    (0..m).map(|i| a[i * n..(i + 1) * n].to_vec()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    super::kernels::dot(a, b)
}

/// SVD of an `m×n` matrix given by its `n` columns, `m >= n`.
/// Returns `(u columns, s, v columns)`, all of length `n` and sorted.
#[allow(clippy::type_complexity)]
fn tall(mut a: Vec<Vec<f64>>, m: usize, n: usize) -> Result<(Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>)> {
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    let tol = f64::EPSILON * m as f64;
    let mut converged = n < 2;
    let mut worst = 0.0;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        worst = 0.0f64;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                let gamma = dot(&a[p], &a[q]);
                if gamma == 0.0 || alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let ratio = gamma.abs() / (alpha * beta).sqrt();
                worst = worst.max(ratio);
                if ratio <= tol {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(Error::SvdNoConvergence {
            sweeps: MAX_SWEEPS,
            off_diag: worst,
        });
    }

    let sigma: Vec<f64> = a.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]));
    let s: Vec<f64> = order.iter().map(|&i| sigma[i]).collect();
    let v: Vec<Vec<f64>> = order.iter().map(|&i| v[i].clone()).collect();

    // Left vectors by modified Gram-Schmidt over the scaled columns, in
    // descending order; numerically null directions are completed from the
    // standard basis.
    let floor = s[0] * f64::EPSILON * (m.max(n) as f64) * 4.0;
    let mut u: Vec<Vec<f64>> = Vec::with_capacity(n);
    for (rank, &i) in order.iter().enumerate() {
        let mut w = a[i].clone();
        if s[rank] > floor && s[rank] > 0.0 {
            orthogonalize(&mut w, &u);
            orthogonalize(&mut w, &u);
            let norm = dot(&w, &w).sqrt();
            if norm > 0.0 {
                w.iter_mut().for_each(|x| *x /= norm);
                u.push(w);
                continue;
            }
        }
        u.push(complete(&u, m));
    }
    Ok((u, s, v))
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

fn orthogonalize(w: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let proj = dot(w, b);
        w.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
    }
}

/// A unit vector orthogonal to `basis`, built from the standard basis vector
/// with the largest residual.
fn complete(basis: &[Vec<f64>], m: usize) -> Vec<f64> {
    let mut best: Option<(f64, Vec<f64>)> = None;
    for j in 0..m {
        let mut e = vec![0.0; m];
        e[j] = 1.0;
        orthogonalize(&mut e, basis);
        orthogonalize(&mut e, basis);
        let norm = dot(&e, &e).sqrt();
        if best.as_ref().is_none_or(|(b, _)| norm > *b) {
            best = Some((norm, e));
        }
    }
    let (norm, mut e) = best.expect("m >= 1");
    e.iter_mut().for_each(|x| *x /= norm);
    e
}

fn finish(mut u: Vec<Vec<f64>>, s: Vec<f64>, mut v: Vec<Vec<f64>>, m: usize, n: usize) -> SvdResult {
    let h = s.len();
    for (uc, vc) in u.iter_mut().zip(v.iter_mut()) {
        if uc.iter().find(|x| **x != 0.0).is_some_and(|x| *x < 0.0) {
            uc.iter_mut().for_each(|x| *x = -*x);
            vc.iter_mut().for_each(|x| *x = -*x);
        }
    }
    let mut ud = vec![0.0; m * h];
    for (t, col) in u.iter().enumerate() {
        for i in 0..m {
            ud[i * h + t] = col[i];
        }
    }
    let mut vd = Vec::with_capacity(h * n);
    for row in &v {
        vd.extend_from_slice(row);
    }
    SvdResult {
        u: Tensor::from_parts_unchecked(vec![m, h], ud),
        s: Tensor::from_parts_unchecked(vec![h], s),
        vt: Tensor::from_parts_unchecked(vec![h, n], vd),
    }
}
