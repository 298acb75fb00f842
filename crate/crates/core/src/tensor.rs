//! Dense row-major tensors over `f64`.
//!
//! `Tensor` is the universal value type for features, weights, and
//! gradients. All arithmetic is 64-bit; the benchmark harness keeps its own
//! 32-bit kernels. Values entering from external input (files, user data)
//! are validated to be finite at construction; internal arithmetic uses the
//! unchecked constructor and relies on explicit NaN screens at the training
//! loop boundary.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Validating constructor: shape product must match data length and all
    /// values must be finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::dim(format!("zero extent in shape {shape:?}")));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::numeric("tensor::new", format!("non-finite value {bad}")));
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for values produced by our own arithmetic.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::from_raw(shape.to_vec(), vec![0.0; numel])
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self::from_raw(shape.to_vec(), vec![value; numel])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_raw(vec![1], vec![value])
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Value of a rank-1, single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        debug_assert_eq!(idx.len(), self.rank());
        let mut off = 0;
        for (d, &i) in idx.iter().enumerate() {
            debug_assert!(i < self.shape[d]);
            off = off * self.shape[d] + i;
        }
        self.data[off]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let mut off = 0;
        for (d, &i) in idx.iter().enumerate() {
            off = off * self.shape[d] + i;
        }
        self.data[off] = value;
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        debug_assert_eq!(self.rank(), 2);
        let w = self.shape[1];
        &self.data[i * w..(i + 1) * w]
    }

    pub fn has_non_finite(&self) -> bool {
        self.data.iter().any(|v| !v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} ({} elements) to {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        Ok(Tensor::from_raw(shape.to_vec(), self.data.clone()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_raw(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    fn zip_map(&self, other: &Tensor, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "{op}: shape {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor::from_raw(self.shape.clone(), data))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    /// In-place `self += s * other`; shapes must match.
    pub fn axpy(&mut self, s: f64, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "axpy: shape {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::dim("dot: shape mismatch"));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Matrix product of two rank-2 tensors: `C[i,j] = Σ_l A[i,l]·B[l,j]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(Error::dim(format!(
                "matmul expects rank-2 operands, got {:?} × {:?}",
                self.shape, other.shape
            )));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner extents disagree: {:?} × {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        mm_kernel(&self.data, &other.data, &mut out, m, k, n);
        Ok(Tensor::from_raw(vec![m, n], out))
    }

    /// Per-batch matrix product of two rank-3 tensors with equal batch
    /// extents; batch `i` is independent of batch `j`.
    pub fn batched_matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 3 || other.rank() != 3 {
            return Err(Error::dim(format!(
                "batched_matmul expects rank-3 operands, got {:?} × {:?}",
                self.shape, other.shape
            )));
        }
        let (b, m, k) = (self.shape[0], self.shape[1], self.shape[2]);
        let (b2, k2, n) = (other.shape[0], other.shape[1], other.shape[2]);
        if b != b2 {
            return Err(Error::dim(format!(
                "batched_matmul batch extents disagree: {b} vs {b2}"
            )));
        }
        if k != k2 {
            return Err(Error::dim(format!(
                "batched_matmul inner extents disagree: {:?} × {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; b * m * n];
        for i in 0..b {
            mm_kernel(
                &self.data[i * m * k..(i + 1) * m * k],
                &other.data[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        Ok(Tensor::from_raw(vec![b, m, n], out))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose2d(&self) -> Tensor {
        debug_assert_eq!(self.rank(), 2);
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::from_raw(vec![n, m], out)
    }

    /// Kronecker product of two rank-2 tensors:
    /// `(A ⊗ B)[i·p+k, j·q+l] = A[i,j]·B[k,l]` for `B` of shape `p×q`.
    pub fn kron(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(Error::dim("kron expects rank-2 operands"));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let (p, q) = (other.shape[0], other.shape[1]);
        let (rows, cols) = (m * p, n * q);
        let mut out = vec![0.0; rows * cols];
        for i in 0..m {
            for j in 0..n {
                let a = self.data[i * n + j];
                for k in 0..p {
                    for l in 0..q {
                        out[(i * p + k) * cols + (j * q + l)] = a * other.data[k * q + l];
                    }
                }
            }
        }
        Ok(Tensor::from_raw(vec![rows, cols], out))
    }
}

/// Row-major `m×k · k×n` accumulation kernel (ikj order so the inner loop
/// runs over contiguous rows of `b` and `out`).
fn mm_kernel(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[l * n..(l + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn matmul_oracle(a: &Tensor, b: &Tensor) -> Tensor {
        // Definitional triple loop, kept separate from the fast kernel.
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for l in 0..k {
                    acc += a.at(&[i, l]) * b.at(&[l, j]);
                }
                out.set(&[i, j], acc);
            }
        }
        out
    }

    #[test]
    fn construction_rejects_shape_mismatch_and_non_finite() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0, f64::INFINITY]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn matmul_identity_passthrough() {
        let x = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = Tensor::identity(2).matmul(&x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn matmul_projector() {
        let p = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let x = Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let y = p.matmul(&x).unwrap();
        assert_eq!(y.data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = Rng::seed_from_u64(11);
        let a = Tensor::gaussian(&[7, 5], 1.0, &mut rng);
        let b = Tensor::gaussian(&[5, 3], 1.0, &mut rng);
        let fast = a.matmul(&b).unwrap();
        let slow = matmul_oracle(&a, &b);
        assert!(fast.max_abs_diff(&slow) < 1e-12);
    }

    #[test]
    fn matmul_shape_mismatch_is_dimension_error() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(Error::Dimension(_))));
    }

    #[test]
    fn batched_matmul_b1_reduces_to_matmul() {
        let mut rng = Rng::seed_from_u64(3);
        let a = Tensor::gaussian(&[4, 5], 1.0, &mut rng);
        let b = Tensor::gaussian(&[5, 2], 1.0, &mut rng);
        let ab = a.matmul(&b).unwrap();
        let a3 = a.reshape(&[1, 4, 5]).unwrap();
        let b3 = b.reshape(&[1, 5, 2]).unwrap();
        let batched = a3.batched_matmul(&b3).unwrap();
        assert_eq!(batched.data(), ab.data());
    }

    #[test]
    fn batched_matmul_identity_blocks() {
        let mut rng = Rng::seed_from_u64(4);
        let x = Tensor::gaussian(&[3, 6, 6], 1.0, &mut rng);
        let mut eye = Tensor::zeros(&[3, 6, 6]);
        for b in 0..3 {
            for i in 0..6 {
                eye.set(&[b, i, i], 1.0);
            }
        }
        let y = x.batched_matmul(&eye).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn batched_matmul_matches_loop_of_matmul() {
        let mut rng = Rng::seed_from_u64(5);
        let a = Tensor::gaussian(&[4, 6, 6], 1.0, &mut rng);
        let b = Tensor::gaussian(&[4, 6, 6], 1.0, &mut rng);
        let fast = a.batched_matmul(&b).unwrap();
        for i in 0..4 {
            let ai = Tensor::from_raw(vec![6, 6], a.data()[i * 36..(i + 1) * 36].to_vec());
            let bi = Tensor::from_raw(vec![6, 6], b.data()[i * 36..(i + 1) * 36].to_vec());
            let ci = ai.matmul(&bi).unwrap();
            assert_eq!(&fast.data()[i * 36..(i + 1) * 36], ci.data());
        }
    }

    #[test]
    fn batched_matmul_rejects_batch_mismatch() {
        let a = Tensor::zeros(&[2, 3, 3]);
        let b = Tensor::zeros(&[3, 3, 3]);
        assert!(matches!(a.batched_matmul(&b), Err(Error::Dimension(_))));
    }

    #[test]
    fn kron_identity() {
        let k = Tensor::identity(2).kron(&Tensor::identity(3)).unwrap();
        assert_eq!(k, Tensor::identity(6));
    }

    #[test]
    fn kron_matches_definitional_double_loop() {
        let mut rng = Rng::seed_from_u64(6);
        let a = Tensor::gaussian(&[2, 2], 1.0, &mut rng);
        let b = Tensor::gaussian(&[3, 3], 1.0, &mut rng);
        let fast = a.kron(&b).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..3 {
                    for l in 0..3 {
                        let expect = a.at(&[i, j]) * b.at(&[k, l]);
                        assert!((fast.at(&[i * 3 + k, j * 3 + l]) - expect).abs() < 1e-14);
                    }
                }
            }
        }
    }

    #[test]
    fn transpose_roundtrip() {
        let mut rng = Rng::seed_from_u64(7);
        let a = Tensor::gaussian(&[3, 5], 1.0, &mut rng);
        assert_eq!(a.transpose2d().transpose2d(), a);
    }
}
