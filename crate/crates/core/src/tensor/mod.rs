//! Dense tensors, a reverse-mode tape, and a deterministic SVD.
//!
//! Values are always `f64`. Every op rejects non-finite results so that an
//! exploding loss surfaces as an error at the op that produced it.

mod graph;
pub(crate) mod kernels;
mod svd;

pub use graph::{Graph, Var};
pub use svd::{svd, SvdResult};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Box<Tensor>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("Tensor::new", format!("shape {shape:?} needs {numel} values, got {}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "Tensor::new" });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = value);
        t
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(vec![], vec![value])
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape("Tensor::from_rows", format!("row {i} has {} values, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut t = Self::zeros(&[n, n]);
        for (i, v) in values.iter().enumerate() {
            t.data[i * n + i] = *v;
        }
        t
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Views the tensor as a matrix. Rank-1 tensors are a single row and
    /// scalars are `1×1`.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [] => Ok((1, 1)),
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape("dims2", format!("rank {} tensor", s.len()))),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().map_or(0, |d| d.0)
    }

    pub fn cols(&self) -> usize {
        self.dims2().map_or(0, |d| d.1)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::matrix(c, r, out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    /// Trace inner product `sum_ij a_ij b_ij`.
    pub fn inner(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape("inner", "operands differ in shape"));
        }
        Ok(kernels::dot(&self.data, &other.data))
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect();
        Self::new(self.shape.clone(), data)
    }

    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }
}

fn ensure_finite(data: &[f64], op: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape("matmul", format!("{m}x{k} · {k2}x{n}")));
    }
    let mut out = vec![0.0; m * n];
    kernels::gemm(a.data(), b.data(), &mut out, m, k, n, false, false, false);
    ensure_finite(&out, "matmul")?;
    Tensor::matrix(m, n, out)
}

pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    ensure_finite(x.data(), "softmax_rows")?;
    let (r, c) = x.dims2()?;
    let mut out = vec![0.0; r * c];
    kernels::softmax_rows(x.data(), r, c, None, &mut out).map_err(|row| Error::DegenerateMask { row })?;
    Tensor::matrix(r, c, out)
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let (r, d) = x.dims2()?;
    if d == 0 || gamma.numel() != d || beta.numel() != d {
        return Err(Error::shape("layer_norm", format!("width {d}, gamma {}, beta {}", gamma.numel(), beta.numel())));
    }
    let mut xhat = vec![0.0; r * d];
    let mut inv_std = vec![0.0; r];
    kernels::standardize_rows(x.data(), r, d, eps, &mut xhat, &mut inv_std);
    for row in xhat.chunks_mut(d) {
        for ((v, g), b) in row.iter_mut().zip(gamma.data()).zip(beta.data()) {
            *v = *v * g + b;
        }
    }
    ensure_finite(&xhat, "layer_norm")?;
    Tensor::matrix(r, d, xhat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_small_product() {
        let a = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&a, &Tensor::identity(2)).unwrap(), a);
        let r = Tensor::from_rows(&[[1.0, 1.0]]).unwrap();
        let c = Tensor::from_rows(&[[2.0], [3.0]]).unwrap();
        assert_eq!(matmul(&r, &c).unwrap().data(), &[5.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(5, 7, &mut rng);
        let b = random(7, 3, &mut rng);
        let got = matmul(&a, &b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut acc = 0.0;
                for p in 0..7 {
                    acc += a.get(i, p) * b.get(p, j);
                }
                assert!((got.get(i, j) - acc).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &a), Err(Error::Shape { .. })));
    }

    #[test]
    fn matmul_transpose_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(4, 6, &mut rng);
        let b = random(6, 3, &mut rng);
        let lhs = matmul(&a, &b).unwrap().transpose().unwrap();
        let rhs = matmul(&b.transpose().unwrap(), &a.transpose().unwrap()).unwrap();
        assert!(lhs.sub(&rhs).unwrap().frobenius_norm() <= 1e-12);
    }

    #[test]
    fn softmax_closed_forms() {
        let x = Tensor::from_rows(&[[0.0, 0.0, 0.0]]).unwrap();
        for p in softmax_rows(&x).unwrap().data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = Tensor::from_rows(&[[0.0, 2f64.ln()]]).unwrap();
        let p = softmax_rows(&x).unwrap();
        assert!((p.data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((p.data()[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_large_logits_do_not_overflow() {
        // exp(-1000) is below the smallest subnormal, so the exact answer
        // rounds to [1, 0] in double precision.
        let x = Tensor::from_rows(&[[1000.0, 0.0]]).unwrap();
        let p = softmax_rows(&x).unwrap();
        assert_eq!(p.data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut x = Tensor::zeros(&[1, 2]);
        x.data_mut()[0] = f64::NAN;
        assert!(matches!(softmax_rows(&x), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn layer_norm_cases() {
        let ones = Tensor::filled(&[2], 1.0);
        let zeros = Tensor::zeros(&[2]);
        let c = Tensor::from_rows(&[[5.0, 5.0]]).unwrap();
        assert_eq!(layer_norm(&c, &ones, &zeros, 1e-5).unwrap().data(), &[0.0, 0.0]);
        let x = Tensor::from_rows(&[[1.0, 3.0]]).unwrap();
        let y = layer_norm(&x, &ones, &zeros, 0.0).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-15 && (y.data()[1] - 1.0).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(4, 8, &mut rng);
        let y = layer_norm(&x, &Tensor::filled(&[8], 1.0), &Tensor::zeros(&[8]), 1e-12).unwrap();
        for r in 0..4 {
            let row = y.row(r);
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() <= 1e-10);
            assert!((var - 1.0).abs() <= 1e-10);
        }
    }

    #[test]
    fn new_rejects_bad_input() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![1], vec![f64::INFINITY]).is_err());
    }
}
