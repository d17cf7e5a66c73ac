//! Tape-based reverse-mode differentiation over row-major matrices.
//!
//! Every node is a matrix; vectors are `1×d` and scalars `1×1`. A graph is
//! single-use: `backward` may run once, after which `zero_grad` must be
//! called before gradients are computed again.

use super::{ensure_finite, kernels, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow {
        x: Var,
        bias: Var,
    },
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Softmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    MaskRows {
        x: Var,
        mask: Vec<bool>,
    },
    MeanRows {
        x: Var,
        mask: Vec<bool>,
        count: usize,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a tensor as a leaf; it is differentiable iff `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        let (r, c) = t.dims2()?;
        Ok(self.push(r, c, t.data().to_vec(), Op::Leaf, t.requires_grad))
    }

    pub fn constant(&mut self, t: &Tensor) -> Result<Var> {
        let (r, c) = t.dims2()?;
        Ok(self.push(r, c, t.data().to_vec(), Op::Leaf, false))
    }

    pub fn param(&mut self, t: &Tensor) -> Result<Var> {
        let (r, c) = t.dims2()?;
        Ok(self.push(r, c, t.data().to_vec(), Op::Leaf, true))
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn value(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::from_parts_unchecked(vec![n.rows, n.cols], n.value.clone())
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let n = &self.nodes[v.0];
        self.grads
            .get(v.0)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::from_parts_unchecked(vec![n.rows, n.cols], g.clone()))
    }

    pub fn grad_data(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn emit(&mut self, name: &'static str, rows: usize, cols: usize, value: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        ensure_finite(&value, name)?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push(rows, cols, value, op, needs_grad))
    }

    fn same_dims(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(Error::shape(op, format!("{da:?} vs {db:?}")));
        }
        Ok(da)
    }

    fn general_matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} · {k2}x{n} (ta={ta}, tb={tb})")));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(self.data(a), self.data(b), &mut out, m, k, n, ta, tb, false);
        self.emit("matmul", m, n, out, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.general_matmul(a, b, false, false)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.general_matmul(a, b, false, true)
    }

    /// `aᵀ · b`
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        self.general_matmul(a, b, true, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_dims("add", a, b)?;
        let v = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        self.emit("add", r, c, v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_dims("sub", a, b)?;
        let v = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        self.emit("sub", r, c, v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_dims("mul", a, b)?;
        let v = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        self.emit("mul", r, c, v, Op::Mul(a, b), &[a, b])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let (r, c) = self.dims(a);
        let v = self.data(a).iter().map(|x| x * k).collect();
        self.emit("scale", r, c, v, Op::Scale(a, k), &[a])
    }

    /// Adds a `1×c` (or length-`c`) row vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let (br, bc) = self.dims(bias);
        if br != 1 || bc != c {
            return Err(Error::shape("add_row", format!("{r}x{c} + {br}x{bc}")));
        }
        let b = self.data(bias).to_vec();
        let v = self
            .data(x)
            .chunks(c.max(1))
            .flat_map(|row| row.iter().zip(&b).map(|(x, y)| x + y).collect::<Vec<_>>())
            .collect();
        self.emit("add_row", r, c, v, Op::AddRow { x, bias }, &[x, bias])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let v = self.data(x).iter().map(|&z| kernels::sigmoid(z)).collect();
        self.emit("sigmoid", r, c, v, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let v = self.data(x).iter().map(|z| z.tanh()).collect();
        self.emit("tanh", r, c, v, Op::Tanh(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let v = self.data(x).iter().map(|&z| kernels::gelu(z)).collect();
        self.emit("gelu", r, c, v, Op::Gelu(x), &[x])
    }

    /// Row-wise softmax. Columns where `key_mask` is false get probability
    /// zero, as if their logits were -inf.
    pub fn softmax_rows(&mut self, x: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        let (r, c) = self.dims(x);
        if let Some(m) = key_mask {
            if m.len() != c {
                return Err(Error::shape("softmax_rows", format!("mask of {} for {c} columns", m.len())));
            }
        }
        let mut out = vec![0.0; r * c];
        kernels::softmax_rows(self.data(x), r, c, key_mask, &mut out).map_err(|row| Error::DegenerateMask { row })?;
        self.emit("softmax_rows", r, c, out, Op::Softmax { x }, &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, d) = self.dims(x);
        if self.dims(gamma) != (1, d) || self.dims(beta) != (1, d) {
            return Err(Error::shape("layer_norm", format!("width {d} vs gamma {:?}", self.dims(gamma))));
        }
        let mut xhat = vec![0.0; r * d];
        let mut inv_std = vec![0.0; r];
        kernels::standardize_rows(self.data(x), r, d, eps, &mut xhat, &mut inv_std);
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut out = xhat.clone();
        for row in out.chunks_mut(d) {
            for ((v, g), b) in row.iter_mut().zip(g).zip(b) {
                *v = *v * g + b;
            }
        }
        self.emit("layer_norm", r, d, out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts.first().map(|p| self.dims(*p).1).unwrap_or(0);
        let mut rows = 0;
        let mut v = Vec::new();
        for p in parts {
            let (pr, pc) = self.dims(*p);
            if pc != c {
                return Err(Error::shape("concat_rows", format!("widths {c} and {pc}")));
            }
            rows += pr;
            v.extend_from_slice(self.data(*p));
        }
        self.emit("concat_rows", rows, c, v, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts.first().map(|p| self.dims(*p).0).unwrap_or(0);
        let mut cols = 0;
        for p in parts {
            let (pr, pc) = self.dims(*p);
            if pr != r {
                return Err(Error::shape("concat_cols", format!("heights {r} and {pr}")));
            }
            cols += pc;
        }
        let mut v = Vec::with_capacity(r * cols);
        for i in 0..r {
            for p in parts {
                let pc = self.dims(*p).1;
                v.extend_from_slice(&self.data(*p)[i * pc..(i + 1) * pc]);
            }
        }
        self.emit("concat_cols", r, cols, v, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start + len > r {
            return Err(Error::shape("slice_rows", format!("{start}+{len} > {r}")));
        }
        let v = self.data(x)[start * c..(start + len) * c].to_vec();
        self.emit("slice_rows", len, c, v, Op::SliceRows { x, start }, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start + len > c {
            return Err(Error::shape("slice_cols", format!("{start}+{len} > {c}")));
        }
        let v = self.data(x).chunks(c).flat_map(|row| row[start..start + len].iter().copied()).collect();
        self.emit("slice_cols", r, len, v, Op::SliceCols { x, start }, &[x])
    }

    /// Zeroes every row whose mask entry is false.
    pub fn mask_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (r, c) = self.dims(x);
        if mask.len() != r {
            return Err(Error::shape("mask_rows", format!("mask of {} for {r} rows", mask.len())));
        }
        let mut v = self.data(x).to_vec();
        for (row, keep) in v.chunks_mut(c.max(1)).zip(mask) {
            if !keep {
                row.iter_mut().for_each(|x| *x = 0.0);
            }
        }
        self.emit("mask_rows", r, c, v, Op::MaskRows { x, mask: mask.to_vec() }, &[x])
    }

    /// Mean over the rows selected by `mask`, giving a `1×c` row.
    pub fn mean_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (r, c) = self.dims(x);
        if mask.len() != r {
            return Err(Error::shape("mean_rows", format!("mask of {} for {r} rows", mask.len())));
        }
        let count = mask.iter().filter(|m| **m).count();
        if count == 0 {
            return Err(Error::DegenerateMask { row: 0 });
        }
        let mut v = vec![0.0; c];
        for (row, keep) in self.data(x).chunks(c.max(1)).zip(mask) {
            if *keep {
                for (a, b) in v.iter_mut().zip(row) {
                    *a += b;
                }
            }
        }
        let n = count as f64;
        v.iter_mut().for_each(|a| *a /= n);
        self.emit("mean_rows", 1, c, v, Op::MeanRows { x, mask: mask.to_vec(), count }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        self.emit("sum", 1, 1, vec![s], Op::Sum(x), &[x])
    }

    /// Inner product of two equally shaped nodes, as a `1×1` node.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    /// Clears gradients so that `backward` may run again.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.consumed = false;
    }

    /// Reverse-mode accumulation from a `1×1` node into every node that
    /// depends on a differentiable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Graph("graph already consumed; call zero_grad first".into()));
        }
        if self.dims(loss) != (1, 1) {
            return Err(Error::Graph(format!("loss must be scalar, got {:?}", self.dims(loss))));
        }
        self.consumed = true;
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        let len = node.value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        let (rows, cols) = (self.nodes[i].rows, self.nodes[i].cols);
        // Temporarily detach the op to satisfy the borrow checker.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                let (m, n) = (rows, cols);
                let (ar, ac) = self.dims(a);
                let k = if ta { ar } else { ac };
                if self.nodes[a.0].needs_grad {
                    // dA = G·op(B)ᵀ, transposed back when A was used transposed.
                    let bv = self.nodes[b.0].value.clone();
                    let ga = self.acc(a).unwrap();
                    if ta {
                        // A is k×m: dA = op(B)·Gᵀ
                        kernels::gemm(&bv, g, ga, k, n, m, tb, true, true);
                    } else {
                        kernels::gemm(g, &bv, ga, m, n, k, false, !tb, true);
                    }
                }
                if self.nodes[b.0].needs_grad {
                    let av = self.nodes[a.0].value.clone();
                    let gb = self.acc(b).unwrap();
                    if tb {
                        // B is n×k: dB = Gᵀ·op(A)
                        kernels::gemm(g, &av, gb, n, m, k, true, ta, true);
                    } else {
                        kernels::gemm(&av, g, gb, k, m, n, !ta, false, true);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(ga) = self.acc(v) {
                        ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(*a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(*b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                if let Some(ga) = self.acc(a) {
                    for ((x, gi), bi) in ga.iter_mut().zip(g).zip(&bv) {
                        *x += gi * bi;
                    }
                }
                if let Some(gb) = self.acc(b) {
                    for ((x, gi), ai) in gb.iter_mut().zip(g).zip(&av) {
                        *x += gi * ai;
                    }
                }
            }
            Op::Scale(a, k) => {
                let k = *k;
                if let Some(ga) = self.acc(*a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * k);
                }
            }
            Op::AddRow { x, bias } => {
                if let Some(gx) = self.acc(*x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                if let Some(gb) = self.acc(*bias) {
                    for row in g.chunks(cols.max(1)) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[i].value.clone();
                if let Some(gx) = self.acc(*x) {
                    for ((a, gi), yi) in gx.iter_mut().zip(g).zip(&y) {
                        *a += gi * yi * (1.0 - yi);
                    }
                }
            }
            Op::Tanh(x) => {
                let y = self.nodes[i].value.clone();
                if let Some(gx) = self.acc(*x) {
                    for ((a, gi), yi) in gx.iter_mut().zip(g).zip(&y) {
                        *a += gi * (1.0 - yi * yi);
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.nodes[x.0].value.clone();
                if let Some(gx) = self.acc(*x) {
                    for ((a, gi), xi) in gx.iter_mut().zip(g).zip(&xv) {
                        *a += gi * kernels::gelu_grad(*xi);
                    }
                }
            }
            Op::Softmax { x } => {
                let y = self.nodes[i].value.clone();
                if let Some(gx) = self.acc(*x) {
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let s = kernels::dot(yr, gr);
                        for c in 0..cols {
                            gx[r * cols + c] += yr[c] * (gr[c] - s);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = cols;
                let gam = self.nodes[gamma.0].value.clone();
                if let Some(gg) = self.acc(*gamma) {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((a, gi), hi) in gg.iter_mut().zip(gr).zip(hr) {
                            *a += gi * hi;
                        }
                    }
                }
                if let Some(gb) = self.acc(*beta) {
                    for gr in g.chunks(d) {
                        gb.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                }
                if let Some(gx) = self.acc(*x) {
                    let n = d as f64;
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        for c in 0..d {
                            dxhat[c] = gr[c] * gam[c];
                        }
                        let s1: f64 = dxhat.iter().sum();
                        let s2 = kernels::dot(&dxhat, hr);
                        let is = inv_std[r];
                        for c in 0..d {
                            gx[r * d + c] += is / n * (n * dxhat[c] - s1 - hr[c] * s2);
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.len();
                    if let Some(gp) = self.acc(*p) {
                        gp.iter_mut().zip(&g[offset..offset + len]).for_each(|(a, b)| *a += b);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let mut col0 = 0;
                for p in parts {
                    let pc = self.nodes[p.0].cols;
                    if let Some(gp) = self.acc(*p) {
                        for r in 0..rows {
                            let src = &g[r * cols + col0..r * cols + col0 + pc];
                            gp[r * pc..(r + 1) * pc].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                        }
                    }
                    col0 += pc;
                }
            }
            Op::SliceRows { x, start } => {
                let start = *start;
                if let Some(gx) = self.acc(*x) {
                    gx[start * cols..(start + rows) * cols].iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::SliceCols { x, start } => {
                let start = *start;
                let xc = self.nodes[x.0].cols;
                if let Some(gx) = self.acc(*x) {
                    for r in 0..rows {
                        gx[r * xc + start..r * xc + start + cols]
                            .iter_mut()
                            .zip(&g[r * cols..(r + 1) * cols])
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::MaskRows { x, mask } => {
                if let Some(gx) = self.acc(*x) {
                    for ((gr, src), keep) in gx.chunks_mut(cols.max(1)).zip(g.chunks(cols.max(1))).zip(mask) {
                        if *keep {
                            gr.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                        }
                    }
                }
            }
            Op::MeanRows { x, mask, count } => {
                let n = *count as f64;
                if let Some(gx) = self.acc(*x) {
                    for (gr, keep) in gx.chunks_mut(cols.max(1)).zip(mask) {
                        if *keep {
                            gr.iter_mut().zip(g).for_each(|(a, b)| *a += b / n);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let gv = g[0];
                if let Some(gx) = self.acc(*x) {
                    gx.iter_mut().for_each(|a| *a += gv);
                }
            }
        }
        self.nodes[i].op = op;
    }
}
