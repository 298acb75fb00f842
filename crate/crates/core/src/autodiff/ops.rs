//! The closed operator set: forward maps and hand-derived VJPs, plus thin
//! tape-building helpers.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::KnnGraph;
use crate::tensor::Tensor;

use super::{DifferentiableOp, Tape, ValueId};

// ---------------------------------------------------------------------------
// matmul / batched matmul

pub struct MatMul;

impl DifferentiableOp for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        inputs[0].matmul(inputs[1])
    }
    fn vjp(&self, inputs: &[&Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        let da = upstream.matmul(&inputs[1].transpose2d())?;
        let db = inputs[0].transpose2d().matmul(upstream)?;
        Ok(vec![da, db])
    }
    fn vjp_masked(
        &self,
        inputs: &[&Tensor],
        upstream: &Tensor,
        needed: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let da = if needed[0] {
            Some(upstream.matmul(&inputs[1].transpose2d())?)
        } else {
            None
        };
        let db = if needed[1] {
            Some(inputs[0].transpose2d().matmul(upstream)?)
        } else {
            None
        };
        Ok(vec![da, db])
    }
}

fn transpose_batched(x: &Tensor) -> Tensor {
    let (b, m, n) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = vec![0.0; b * m * n];
    for i in 0..b {
        for r in 0..m {
            for c in 0..n {
                out[i * m * n + c * m + r] = x.data()[i * m * n + r * n + c];
            }
        }
    }
    Tensor::from_raw(vec![b, n, m], out)
}

pub struct BatchedMatMul;

impl DifferentiableOp for BatchedMatMul {
    fn name(&self) -> &'static str {
        "batched_matmul"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        inputs[0].batched_matmul(inputs[1])
    }
    fn vjp(&self, inputs: &[&Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        let da = upstream.batched_matmul(&transpose_batched(inputs[1]))?;
        let db = transpose_batched(inputs[0]).batched_matmul(upstream)?;
        Ok(vec![da, db])
    }
    fn vjp_masked(
        &self,
        inputs: &[&Tensor],
        upstream: &Tensor,
        needed: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let da = if needed[0] {
            Some(upstream.batched_matmul(&transpose_batched(inputs[1]))?)
        } else {
            None
        };
        let db = if needed[1] {
            Some(transpose_batched(inputs[0]).batched_matmul(upstream)?)
        } else {
            None
        };
        Ok(vec![da, db])
    }
}

// ---------------------------------------------------------------------------
// elementwise arithmetic

pub struct Add;

impl DifferentiableOp for Add {
    fn name(&self) -> &'static str {
        "add"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        inputs[0].add(inputs[1])
    }
    fn vjp(&self, _inputs: &[&Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![upstream.clone(), upstream.clone()])
    }
}

/// `X (r×c) + bias (c)` broadcast over rows.
pub struct AddRowBias;

impl DifferentiableOp for AddRowBias {
    fn name(&self) -> &'static str {
        "add_row_bias"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (x, bias) = (inputs[0], inputs[1]);
        if x.rank() != 2 || bias.rank() != 1 || x.shape()[1] != bias.shape()[0] {
            return Err(Error::dim(format!(
                "add_row_bias: {:?} + {:?}",
                x.shape(),
                bias.shape()
            )));
        }
        let c = bias.shape()[0];
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bias.data()[i % c];
        }
        Ok(out)
    }
    fn vjp(&self, inputs: &[&Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        let c = inputs[1].shape()[0];
        let mut db = vec![0.0; c];
        for (i, v) in upstream.data().iter().enumerate() {
            db[i % c] += v;
        }
        Ok(vec![upstream.clone(), Tensor::from_raw(vec![c], db)])
    }
}

pub struct Mul;

impl DifferentiableOp for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        inputs[0].mul(inputs[1])
    }
    fn vjp(&self, inputs: &[&Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![upstream.mul(inputs[1])?, upstream.mul(inputs[0])?])
    }
}

/// `X · s` with a trainable single-element scale.
pub struct ScaleByScalar;

impl DifferentiableOp for ScaleByScalar {
    fn name(&self) -> &'static str {
        "scale_by_scalar"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        if inputs[1].numel() != 1 {
            return Err(Error::dim("scale_by_scalar: scale must be a single element"));
        }
        Ok(inputs[0].scale(inputs[1].item()))
    }
    fn vjp(&self, inputs: &[&Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        let ds = upstream.dot(inputs[0])?;
        Ok(vec![upstream.scale(inputs[1].item()), Tensor::scalar(ds)])
    }
}

/// Multiplication by a compile-time constant (no gradient target).
pub struct ConstScale(pub f64);

impl DifferentiableOp for ConstScale {
    fn name(&self) -> &'static str {
        "const_scale"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(inputs[0].scale(self.0))
    }
    fn vjp(&self, _inputs: &[&Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![upstream.scale(self.0)])
    }
}

// ---------------------------------------------------------------------------
// nonlinearities

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_C: f64 = 0.044_715;

/// tanh-form GELU.
pub struct Gelu;

impl DifferentiableOp for Gelu {
    fn name(&self) -> &'static str {
        "gelu"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(inputs[0].map(|x| 0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())))
    }
    fn vjp(&self, inputs: &[&Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        let grad = inputs[0].map(|x| {
            let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
            let sech2 = 1.0 - t * t;
            0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
        });
        Ok(vec![upstream.mul(&grad)?])
    }
}

/// Row-wise layer normalization with learned scale and shift:
/// inputs `(X (rows×c), gamma (c), beta (c))`.
pub struct LayerNorm {
    pub eps: f64,
}

impl LayerNorm {
    fn stats(x_row: &[f64], eps: f64) -> (f64, f64) {
        let c = x_row.len() as f64;
        let mean = x_row.iter().sum::<f64>() / c;
        let var = x_row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
        (mean, 1.0 / (var + eps).sqrt())
    }
}

impl DifferentiableOp for LayerNorm {
    fn name(&self) -> &'static str {
        "layernorm"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
        if x.rank() != 2 || gamma.shape() != [x.shape()[1]] || beta.shape() != [x.shape()[1]] {
            return Err(Error::dim("layernorm: expected (rows×c, c, c)"));
        }
        let (rows, c) = (x.shape()[0], x.shape()[1]);
        let mut out = vec![0.0; rows * c];
        for r in 0..rows {
            let xr = x.row(r);
            let (mean, inv) = Self::stats(xr, self.eps);
            for j in 0..c {
                out[r * c + j] = gamma.data()[j] * (xr[j] - mean) * inv + beta.data()[j];
            }
        }
        Ok(Tensor::from_raw(vec![rows, c], out))
    }
    fn vjp(&self, inputs: &[&Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let (rows, c) = (x.shape()[0], x.shape()[1]);
        let cf = c as f64;
        let mut dx = vec![0.0; rows * c];
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for r in 0..rows {
            let xr = x.row(r);
            let ur = upstream.row(r);
            let (mean, inv) = Self::stats(xr, self.eps);
            let mut sum_gy = 0.0;
            let mut sum_gy_xhat = 0.0;
            for j in 0..c {
                let xhat = (xr[j] - mean) * inv;
                let gy = ur[j] * gamma.data()[j];
                sum_gy += gy;
                sum_gy_xhat += gy * xhat;
                dgamma[j] += ur[j] * xhat;
                dbeta[j] += ur[j];
            }
            for j in 0..c {
                let xhat = (xr[j] - mean) * inv;
                let gy = ur[j] * gamma.data()[j];
                dx[r * c + j] = inv * (gy - sum_gy / cf - xhat * sum_gy_xhat / cf);
            }
        }
        Ok(vec![
            Tensor::from_raw(vec![rows, c], dx),
            Tensor::from_raw(vec![c], dgamma),
            Tensor::from_raw(vec![c], dbeta),
        ])
    }
}

/// Softmax over the trailing axis of a rank-2 or rank-3 tensor.
pub struct Softmax;

fn softmax_rows(x: &Tensor) -> Tensor {
    let last = *x.shape().last().unwrap();
    let rows = x.numel() / last;
    let mut out = vec![0.0; x.numel()];
    for r in 0..rows {
        let xr = &x.data()[r * last..(r + 1) * last];
        let m = xr.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut denom = 0.0;
        for j in 0..last {
            let e = (xr[j] - m).exp();
            out[r * last + j] = e;
            denom += e;
        }
        for v in &mut out[r * last..(r + 1) * last] {
            *v /= denom;
        }
    }
    Tensor::from_raw(x.shape().to_vec(), out)
}

impl DifferentiableOp for Softmax {
    fn name(&self) -> &'static str {
        "softmax"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(softmax_rows(inputs[0]))
    }
    fn vjp(&self, inputs: &[&Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        let s = softmax_rows(inputs[0]);
        let last = *s.shape().last().unwrap();
        let rows = s.numel() / last;
        let mut dx = vec![0.0; s.numel()];
        for r in 0..rows {
            let sr = &s.data()[r * last..(r + 1) * last];
            let ur = &upstream.data()[r * last..(r + 1) * last];
            let dot: f64 = sr.iter().zip(ur).map(|(a, b)| a * b).sum();
            for j in 0..last {
                dx[r * last + j] = sr[j] * (ur[j] - dot);
            }
        }
        Ok(vec![Tensor::from_raw(s.shape().to_vec(), dx)])
    }
}

/// Mean squared error against a fixed target.
pub struct MseLoss {
    pub target: Tensor,
}

impl DifferentiableOp for MseLoss {
    fn name(&self) -> &'static str {
        "mse_loss"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        if x.shape() != self.target.shape() {
            return Err(Error::dim("mse_loss: prediction/target shape mismatch"));
        }
        let n = x.numel() as f64;
        let sum: f64 = x
            .data()
            .iter()
            .zip(self.target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(Tensor::scalar(sum / n))
    }
    fn vjp(&self, inputs: &[&Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        let x = inputs[0];
        let scale = 2.0 * upstream.item() / x.numel() as f64;
        let dx = x
            .data()
            .iter()
            .zip(self.target.data())
            .map(|(a, b)| scale * (a - b))
            .collect();
        Ok(vec![Tensor::from_raw(x.shape().to_vec(), dx)])
    }
}

/// Fused stable cross-entropy from logits against a fixed class index.
pub struct SoftmaxCrossEntropy {
    pub label: usize,
}

impl DifferentiableOp for SoftmaxCrossEntropy {
    fn name(&self) -> &'static str {
        "softmax_cross_entropy"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let logits = inputs[0];
        if logits.rank() != 1 || self.label >= logits.numel() {
            return Err(Error::dim("softmax_cross_entropy: rank-1 logits, label in range"));
        }
        let m = logits.data().iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = logits.data().iter().map(|&v| (v - m).exp()).sum::<f64>().ln() + m;
        Ok(Tensor::scalar(lse - logits.data()[self.label]))
    }
    fn vjp(&self, inputs: &[&Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        let mut probs = softmax_rows(inputs[0]);
        probs.data_mut()[self.label] -= 1.0;
        Ok(vec![probs.scale(upstream.item())])
    }
}

// ---------------------------------------------------------------------------
// shape movement

/// numpy-style rank-3 transpose: `out.shape[k] = in.shape[axes[k]]` and
/// `out[o] = in[i]` with `i[axes[k]] = o[k]`.
pub struct PermuteAxes3 {
    pub axes: [usize; 3],
}

fn permute3(x: &Tensor, axes: [usize; 3]) -> Tensor {
    let s = x.shape();
    let out_shape = [s[axes[0]], s[axes[1]], s[axes[2]]];
    let in_strides = [s[1] * s[2], s[2], 1];
    let mut out = vec![0.0; x.numel()];
    let mut o = 0;
    for o0 in 0..out_shape[0] {
        for o1 in 0..out_shape[1] {
            for o2 in 0..out_shape[2] {
                let mut idx = [0usize; 3];
                idx[axes[0]] = o0;
                idx[axes[1]] = o1;
                idx[axes[2]] = o2;
                out[o] = x.data()
                    [idx[0] * in_strides[0] + idx[1] * in_strides[1] + idx[2] * in_strides[2]];
                o += 1;
            }
        }
    }
    Tensor::from_raw(out_shape.to_vec(), out)
}

impl DifferentiableOp for PermuteAxes3 {
    fn name(&self) -> &'static str {
        "permute_axes"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        if inputs[0].rank() != 3 {
            return Err(Error::dim("permute_axes: rank-3 input required"));
        }
        Ok(permute3(inputs[0], self.axes))
    }
    fn vjp(&self, _inputs: &[&Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        let mut inv = [0usize; 3];
        for (k, &a) in self.axes.iter().enumerate() {
            inv[a] = k;
        }
        Ok(vec![permute3(upstream, inv)])
    }
}

/// Column permutation `Y[:,k] = X[:,perm[k]]`.
pub struct PermuteCols {
    pub perm: Vec<usize>,
}

impl DifferentiableOp for PermuteCols {
    fn name(&self) -> &'static str {
        "permute_cols"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        if x.rank() != 2 || x.shape()[1] != self.perm.len() {
            return Err(Error::dim(format!(
                "permute_cols: {:?} with permutation of length {}",
                x.shape(),
                self.perm.len()
            )));
        }
        Ok(crate::structured::permute_cols(x, &self.perm))
    }
    fn vjp(&self, inputs: &[&Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        let (rows, cols) = (inputs[0].shape()[0], inputs[0].shape()[1]);
        let mut dx = vec![0.0; rows * cols];
        for r in 0..rows {
            for (k, &p) in self.perm.iter().enumerate() {
                dx[r * cols + p] += upstream.data()[r * cols + k];
            }
        }
        Ok(vec![Tensor::from_raw(vec![rows, cols], dx)])
    }
}

/// Row gather `Y[r] = X[idx[r]]`; indices may repeat.
pub struct GatherRows {
    pub idx: Vec<usize>,
}

impl DifferentiableOp for GatherRows {
    fn name(&self) -> &'static str {
        "gather_rows"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        if x.rank() != 2 {
            return Err(Error::dim("gather_rows: rank-2 input required"));
        }
        let c = x.shape()[1];
        let mut out = Vec::with_capacity(self.idx.len() * c);
        for &i in &self.idx {
            if i >= x.shape()[0] {
                return Err(Error::dim(format!("gather_rows: index {i} out of range")));
            }
            out.extend_from_slice(x.row(i));
        }
        Ok(Tensor::from_raw(vec![self.idx.len(), c], out))
    }
    fn vjp(&self, inputs: &[&Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        let (rows, c) = (inputs[0].shape()[0], inputs[0].shape()[1]);
        let mut dx = vec![0.0; rows * c];
        for (r, &i) in self.idx.iter().enumerate() {
            for j in 0..c {
                dx[i * c + j] += upstream.data()[r * c + j];
            }
        }
        Ok(vec![Tensor::from_raw(vec![rows, c], dx)])
    }
}

/// Column slice `Y = X[:, start..start+len]`.
pub struct SliceCols {
    pub start: usize,
    pub len: usize,
}

impl DifferentiableOp for SliceCols {
    fn name(&self) -> &'static str {
        "slice_cols"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        if x.rank() != 2 || self.start + self.len > x.shape()[1] {
            return Err(Error::dim("slice_cols out of range"));
        }
        let (rows, c) = (x.shape()[0], x.shape()[1]);
        let mut out = Vec::with_capacity(rows * self.len);
        for r in 0..rows {
            out.extend_from_slice(&x.data()[r * c + self.start..r * c + self.start + self.len]);
        }
        Ok(Tensor::from_raw(vec![rows, self.len], out))
    }
    fn vjp(&self, inputs: &[&Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        let (rows, c) = (inputs[0].shape()[0], inputs[0].shape()[1]);
        let mut dx = vec![0.0; rows * c];
        for r in 0..rows {
            for j in 0..self.len {
                dx[r * c + self.start + j] = upstream.data()[r * self.len + j];
            }
        }
        Ok(vec![Tensor::from_raw(vec![rows, c], dx)])
    }
}

/// Rank-2 transpose.
pub struct Transpose2;

impl DifferentiableOp for Transpose2 {
    fn name(&self) -> &'static str {
        "transpose"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        if inputs[0].rank() != 2 {
            return Err(Error::dim("transpose: rank-2 input required"));
        }
        Ok(inputs[0].transpose2d())
    }
    fn vjp(&self, _inputs: &[&Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![upstream.transpose2d()])
    }
}

pub struct Reshape {
    pub shape: Vec<usize>,
}

impl DifferentiableOp for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        inputs[0].reshape(&self.shape)
    }
    fn vjp(&self, inputs: &[&Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        upstream.reshape(inputs[0].shape()).map(|t| vec![t])
    }
}

/// Prepend a single row vector: `(v (c), X (r×c)) → ((r+1)×c)`.
pub struct PrependRow;

impl DifferentiableOp for PrependRow {
    fn name(&self) -> &'static str {
        "prepend_row"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (v, x) = (inputs[0], inputs[1]);
        if v.rank() != 1 || x.rank() != 2 || v.shape()[0] != x.shape()[1] {
            return Err(Error::dim("prepend_row: (c,) and (r×c) required"));
        }
        let mut out = Vec::with_capacity((x.shape()[0] + 1) * x.shape()[1]);
        out.extend_from_slice(v.data());
        out.extend_from_slice(x.data());
        Ok(Tensor::from_raw(vec![x.shape()[0] + 1, x.shape()[1]], out))
    }
    fn vjp(&self, inputs: &[&Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        let c = inputs[0].shape()[0];
        let dv = Tensor::from_raw(vec![c], upstream.data()[..c].to_vec());
        let dx = Tensor::from_raw(inputs[1].shape().to_vec(), upstream.data()[c..].to_vec());
        Ok(vec![dv, dx])
    }
}

/// Concatenate two vectors.
pub struct ConcatVec;

impl DifferentiableOp for ConcatVec {
    fn name(&self) -> &'static str {
        "concat_vec"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (a, b) = (inputs[0], inputs[1]);
        if a.rank() != 1 || b.rank() != 1 {
            return Err(Error::dim("concat_vec: rank-1 inputs required"));
        }
        let mut out = a.data().to_vec();
        out.extend_from_slice(b.data());
        Ok(Tensor::from_raw(vec![a.numel() + b.numel()], out))
    }
    fn vjp(&self, inputs: &[&Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        let n = inputs[0].numel();
        Ok(vec![
            Tensor::from_raw(vec![n], upstream.data()[..n].to_vec()),
            Tensor::from_raw(vec![inputs[1].numel()], upstream.data()[n..].to_vec()),
        ])
    }
}

// ---------------------------------------------------------------------------
// pooling

/// Column-wise max over rows: `(r×c) → (c)`; gradient routes to the first
/// maximizing row.
pub struct MaxPoolRows;

impl DifferentiableOp for MaxPoolRows {
    fn name(&self) -> &'static str {
        "max_pool_rows"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        if x.rank() != 2 {
            return Err(Error::dim("max_pool_rows: rank-2 input required"));
        }
        let (rows, c) = (x.shape()[0], x.shape()[1]);
        let mut out = x.data()[..c].to_vec();
        for r in 1..rows {
            for j in 0..c {
                out[j] = out[j].max(x.data()[r * c + j]);
            }
        }
        Ok(Tensor::from_raw(vec![c], out))
    }
    fn vjp(&self, inputs: &[&Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        let x = inputs[0];
        let (rows, c) = (x.shape()[0], x.shape()[1]);
        let mut dx = vec![0.0; rows * c];
        for j in 0..c {
            let mut best = 0;
            for r in 1..rows {
                if x.data()[r * c + j] > x.data()[best * c + j] {
                    best = r;
                }
            }
            dx[best * c + j] = upstream.data()[j];
        }
        Ok(vec![Tensor::from_raw(vec![rows, c], dx)])
    }
}

/// Column-wise mean over rows: `(r×c) → (c)`.
pub struct MeanPoolRows;

impl DifferentiableOp for MeanPoolRows {
    fn name(&self) -> &'static str {
        "mean_pool_rows"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        if x.rank() != 2 {
            return Err(Error::dim("mean_pool_rows: rank-2 input required"));
        }
        let (rows, c) = (x.shape()[0], x.shape()[1]);
        let mut out = vec![0.0; c];
        for r in 0..rows {
            for j in 0..c {
                out[j] += x.data()[r * c + j];
            }
        }
        for v in &mut out {
            *v /= rows as f64;
        }
        Ok(Tensor::from_raw(vec![c], out))
    }
    fn vjp(&self, inputs: &[&Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        let (rows, c) = (inputs[0].shape()[0], inputs[0].shape()[1]);
        let mut dx = vec![0.0; rows * c];
        for r in 0..rows {
            for j in 0..c {
                dx[r * c + j] = upstream.data()[j] / rows as f64;
            }
        }
        Ok(vec![Tensor::from_raw(vec![rows, c], dx)])
    }
}

/// Per-segment max pooling: `(segments·seg_len × c) → (segments × c)`.
pub struct SegmentMaxPool {
    pub segments: usize,
    pub seg_len: usize,
}

impl DifferentiableOp for SegmentMaxPool {
    fn name(&self) -> &'static str {
        "segment_max_pool"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        if x.rank() != 2 || x.shape()[0] != self.segments * self.seg_len {
            return Err(Error::dim("segment_max_pool: row count mismatch"));
        }
        let c = x.shape()[1];
        let mut out = vec![f64::NEG_INFINITY; self.segments * c];
        for s in 0..self.segments {
            for r in 0..self.seg_len {
                let row = (s * self.seg_len + r) * c;
                for j in 0..c {
                    out[s * c + j] = out[s * c + j].max(x.data()[row + j]);
                }
            }
        }
        Ok(Tensor::from_raw(vec![self.segments, c], out))
    }
    fn vjp(&self, inputs: &[&Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        let x = inputs[0];
        let c = x.shape()[1];
        let mut dx = vec![0.0; x.numel()];
        for s in 0..self.segments {
            for j in 0..c {
                let mut best = s * self.seg_len;
                for r in 1..self.seg_len {
                    let row = s * self.seg_len + r;
                    if x.data()[row * c + j] > x.data()[best * c + j] {
                        best = row;
                    }
                }
                dx[best * c + j] = upstream.data()[s * c + j];
            }
        }
        Ok(vec![Tensor::from_raw(x.shape().to_vec(), dx)])
    }
}

// ---------------------------------------------------------------------------
// structure-aware operators

/// Sparse K-Rectify with a trainable scale: inputs `(X ((offset+G)×C),
/// lambda (1))`, output `X + λ·mix(X)` where `mix` interpolates each graph
/// token from its IDW-weighted neighbors and leaves the first `offset` rows
/// (class-style tokens without coordinates) untouched.
pub struct KRectify {
    pub graph: Arc<KnnGraph>,
    pub offset: usize,
}

impl KRectify {
    fn mix(&self, x: &Tensor) -> Tensor {
        let c = x.shape()[1];
        let g = self.graph.len();
        let mut out = Tensor::zeros(x.shape());
        for t in 0..g {
            let dst_base = (self.offset + t) * c;
            for (s, &n) in self.graph.neighbors(t).iter().enumerate() {
                let w = self.graph.idw_row(t)[s];
                let src = &x.data()[(self.offset + n) * c..(self.offset + n + 1) * c];
                let dst = &mut out.data_mut()[dst_base..dst_base + c];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d += w * v;
                }
            }
        }
        out
    }
}

impl DifferentiableOp for KRectify {
    fn name(&self) -> &'static str {
        "k_rectify"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (x, lambda) = (inputs[0], inputs[1]);
        if x.rank() != 2 || x.shape()[0] != self.offset + self.graph.len() {
            return Err(Error::dim(format!(
                "k_rectify: features {:?} vs offset {} + G {}",
                x.shape(),
                self.offset,
                self.graph.len()
            )));
        }
        if lambda.numel() != 1 {
            return Err(Error::dim("k_rectify: lambda must be a single element"));
        }
        let mut out = x.clone();
        out.axpy(lambda.item(), &self.mix(x))?;
        Ok(out)
    }
    fn vjp(&self, inputs: &[&Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        let (x, lambda) = (inputs[0], inputs[1]);
        let c = x.shape()[1];
        let lam = lambda.item();
        // dλ contracts the upstream with mix(X).
        let dlam = upstream.dot(&self.mix(x))?;
        // dX = up + λ·mixᵀ(up).
        let mut dx = upstream.clone();
        for t in 0..self.graph.len() {
            let up_row = &upstream.data()[(self.offset + t) * c..(self.offset + t + 1) * c];
            let up_row = up_row.to_vec();
            for (s, &n) in self.graph.neighbors(t).iter().enumerate() {
                let w = lam * self.graph.idw_row(t)[s];
                let dst = &mut dx.data_mut()[(self.offset + n) * c..(self.offset + n + 1) * c];
                for (d, &u) in dst.iter_mut().zip(&up_row) {
                    *d += w * u;
                }
            }
        }
        Ok(vec![dx, Tensor::scalar(dlam)])
    }
}

/// Block-diagonal application with trainable dense blocks: inputs
/// `(X (G×b·s_in), B_1, …, B_b)` each `s_in×s_out`.
pub struct BlockDiagApply {
    pub blocks: usize,
    pub s_in: usize,
    pub s_out: usize,
}

impl DifferentiableOp for BlockDiagApply {
    fn name(&self) -> &'static str {
        "block_diag_apply"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        if inputs.len() != 1 + self.blocks {
            return Err(Error::dim("block_diag_apply: wrong block count"));
        }
        if x.rank() != 2 || x.shape()[1] != self.blocks * self.s_in {
            return Err(Error::dim(format!(
                "block_diag_apply: input {:?} vs {} blocks of {}",
                x.shape(),
                self.blocks,
                self.s_in
            )));
        }
        let g = x.shape()[0];
        let (in_dim, out_dim) = (self.blocks * self.s_in, self.blocks * self.s_out);
        let mut out = Tensor::zeros(&[g, out_dim]);
        for i in 0..self.blocks {
            let blk = inputs[1 + i];
            if blk.shape() != [self.s_in, self.s_out] {
                return Err(Error::dim(format!(
                    "block {i} has shape {:?}, expected {}×{}",
                    blk.shape(),
                    self.s_in,
                    self.s_out
                )));
            }
            for r in 0..g {
                let src = &x.data()[r * in_dim + i * self.s_in..r * in_dim + (i + 1) * self.s_in];
                let dst = &mut out.data_mut()
                    [r * out_dim + i * self.s_out..r * out_dim + (i + 1) * self.s_out];
                for (l, &sv) in src.iter().enumerate() {
                    if sv == 0.0 {
                        continue;
                    }
                    let brow = &blk.data()[l * self.s_out..(l + 1) * self.s_out];
                    for (o, &bv) in dst.iter_mut().zip(brow) {
                        *o += sv * bv;
                    }
                }
            }
        }
        Ok(out)
    }
    fn vjp(&self, inputs: &[&Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        let x = inputs[0];
        let g = x.shape()[0];
        let (in_dim, out_dim) = (self.blocks * self.s_in, self.blocks * self.s_out);
        let mut dx = Tensor::zeros(&[g, in_dim]);
        let mut dblocks: Vec<Tensor> =
            (0..self.blocks).map(|_| Tensor::zeros(&[self.s_in, self.s_out])).collect();
        for i in 0..self.blocks {
            let blk = inputs[1 + i];
            let db = &mut dblocks[i];
            for r in 0..g {
                let up_row = &upstream.data()
                    [r * out_dim + i * self.s_out..r * out_dim + (i + 1) * self.s_out];
                let x_row = &x.data()[r * in_dim + i * self.s_in..r * in_dim + (i + 1) * self.s_in];
                let dx_row = &mut dx.data_mut()
                    [r * in_dim + i * self.s_in..r * in_dim + (i + 1) * self.s_in];
                for l in 0..self.s_in {
                    let brow = &blk.data()[l * self.s_out..(l + 1) * self.s_out];
                    let mut acc = 0.0;
                    for (c, (&bv, &uv)) in brow.iter().zip(up_row).enumerate() {
                        acc += bv * uv;
                        db.data_mut()[l * self.s_out + c] += x_row[l] * uv;
                    }
                    dx_row[l] = acc;
                }
            }
        }
        let mut out = vec![dx];
        out.extend(dblocks);
        Ok(out)
    }
}

/// Kronecker product of two trainable matrices.
pub struct Kron;

impl DifferentiableOp for Kron {
    fn name(&self) -> &'static str {
        "kron"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        inputs[0].kron(inputs[1])
    }
    fn vjp(&self, inputs: &[&Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        let (a, b) = (inputs[0], inputs[1]);
        let (m, n) = (a.shape()[0], a.shape()[1]);
        let (p, q) = (b.shape()[0], b.shape()[1]);
        let cols = n * q;
        let mut da = vec![0.0; m * n];
        let mut db = vec![0.0; p * q];
        for i in 0..m {
            for j in 0..n {
                let av = a.data()[i * n + j];
                let mut acc = 0.0;
                for k in 0..p {
                    for l in 0..q {
                        let u = upstream.data()[(i * p + k) * cols + (j * q + l)];
                        acc += u * b.data()[k * q + l];
                        db[k * q + l] += u * av;
                    }
                }
                da[i * n + j] = acc;
            }
        }
        Ok(vec![
            Tensor::from_raw(vec![m, n], da),
            Tensor::from_raw(vec![p, q], db),
        ])
    }
}

// ---------------------------------------------------------------------------
// tape-building helpers

pub fn matmul(t: &mut Tape, a: ValueId, b: ValueId) -> Result<ValueId> {
    t.apply(Box::new(MatMul), &[a, b])
}

pub fn batched_matmul(t: &mut Tape, a: ValueId, b: ValueId) -> Result<ValueId> {
    t.apply(Box::new(BatchedMatMul), &[a, b])
}

pub fn add(t: &mut Tape, a: ValueId, b: ValueId) -> Result<ValueId> {
    t.apply(Box::new(Add), &[a, b])
}

pub fn add_row_bias(t: &mut Tape, x: ValueId, bias: ValueId) -> Result<ValueId> {
    t.apply(Box::new(AddRowBias), &[x, bias])
}

pub fn mul(t: &mut Tape, a: ValueId, b: ValueId) -> Result<ValueId> {
    t.apply(Box::new(Mul), &[a, b])
}

pub fn scale_by_scalar(t: &mut Tape, x: ValueId, s: ValueId) -> Result<ValueId> {
    t.apply(Box::new(ScaleByScalar), &[x, s])
}

pub fn const_scale(t: &mut Tape, x: ValueId, c: f64) -> Result<ValueId> {
    t.apply(Box::new(ConstScale(c)), &[x])
}

pub fn gelu(t: &mut Tape, x: ValueId) -> Result<ValueId> {
    t.apply(Box::new(Gelu), &[x])
}

pub fn layernorm(t: &mut Tape, x: ValueId, gamma: ValueId, beta: ValueId) -> Result<ValueId> {
    t.apply(Box::new(LayerNorm { eps: 1e-5 }), &[x, gamma, beta])
}

pub fn softmax(t: &mut Tape, x: ValueId) -> Result<ValueId> {
    t.apply(Box::new(Softmax), &[x])
}

pub fn cross_entropy(t: &mut Tape, logits: ValueId, label: usize) -> Result<ValueId> {
    t.apply(Box::new(SoftmaxCrossEntropy { label }), &[logits])
}

pub fn mse_loss(t: &mut Tape, x: ValueId, target: Tensor) -> Result<ValueId> {
    t.apply(Box::new(MseLoss { target }), &[x])
}

pub fn permute_axes3(t: &mut Tape, x: ValueId, axes: [usize; 3]) -> Result<ValueId> {
    t.apply(Box::new(PermuteAxes3 { axes }), &[x])
}

pub fn permute_cols(t: &mut Tape, x: ValueId, perm: Vec<usize>) -> Result<ValueId> {
    t.apply(Box::new(PermuteCols { perm }), &[x])
}

pub fn gather_rows(t: &mut Tape, x: ValueId, idx: Vec<usize>) -> Result<ValueId> {
    t.apply(Box::new(GatherRows { idx }), &[x])
}

pub fn slice_cols(t: &mut Tape, x: ValueId, start: usize, len: usize) -> Result<ValueId> {
    t.apply(Box::new(SliceCols { start, len }), &[x])
}

pub fn reshape(t: &mut Tape, x: ValueId, shape: Vec<usize>) -> Result<ValueId> {
    t.apply(Box::new(Reshape { shape }), &[x])
}

pub fn transpose2(t: &mut Tape, x: ValueId) -> Result<ValueId> {
    t.apply(Box::new(Transpose2), &[x])
}

pub fn prepend_row(t: &mut Tape, v: ValueId, x: ValueId) -> Result<ValueId> {
    t.apply(Box::new(PrependRow), &[v, x])
}

pub fn concat_vec(t: &mut Tape, a: ValueId, b: ValueId) -> Result<ValueId> {
    t.apply(Box::new(ConcatVec), &[a, b])
}

pub fn max_pool_rows(t: &mut Tape, x: ValueId) -> Result<ValueId> {
    t.apply(Box::new(MaxPoolRows), &[x])
}

pub fn mean_pool_rows(t: &mut Tape, x: ValueId) -> Result<ValueId> {
    t.apply(Box::new(MeanPoolRows), &[x])
}

pub fn segment_max_pool(t: &mut Tape, x: ValueId, segments: usize, seg_len: usize) -> Result<ValueId> {
    t.apply(Box::new(SegmentMaxPool { segments, seg_len }), &[x])
}

pub fn k_rectify(
    t: &mut Tape,
    x: ValueId,
    lambda: ValueId,
    graph: Arc<KnnGraph>,
    offset: usize,
) -> Result<ValueId> {
    t.apply(Box::new(KRectify { graph, offset }), &[x, lambda])
}

pub fn block_diag_apply(
    t: &mut Tape,
    x: ValueId,
    blocks: &[ValueId],
    s_in: usize,
    s_out: usize,
) -> Result<ValueId> {
    let mut inputs = vec![x];
    inputs.extend_from_slice(blocks);
    t.apply(
        Box::new(BlockDiagApply { blocks: blocks.len(), s_in, s_out }),
        &inputs,
    )
}

pub fn kron(t: &mut Tape, a: ValueId, b: ValueId) -> Result<ValueId> {
    t.apply(Box::new(Kron), &[a, b])
}
