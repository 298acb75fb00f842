//! Parameter-free multi-layer feature fusion.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which layer outputs feed the fusion head (1-based block indices) and how
/// they are pooled. The `i`-th selected layer is weighted `2^(i−1)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusionHeadConfig {
    pub layer_indices: Vec<usize>,
}

impl FusionHeadConfig {
    pub fn new(layer_indices: Vec<usize>, depth: usize) -> Result<Self> {
        if layer_indices.is_empty() {
            return Err(Error::config("fusion head needs at least one layer"));
        }
        if !layer_indices.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::config("fusion layer indices must be strictly increasing"));
        }
        if *layer_indices.last().unwrap() > depth || layer_indices[0] == 0 {
            return Err(Error::config(format!(
                "fusion layer indices {layer_indices:?} outside 1..={depth}"
            )));
        }
        Ok(Self { layer_indices })
    }

    /// Three evenly spaced layers ending at the last block: `{4, 8, 12}` for
    /// a 12-layer stack, `{2, 3, 4}` at depth 4.
    pub fn default_for_depth(depth: usize) -> Result<Self> {
        let mut idx: Vec<usize> = (1..=3).map(|k| (depth * k).div_ceil(3)).collect();
        idx.dedup();
        Self::new(idx, depth)
    }
}

/// MixPool: elementwise sum of max-pool and mean-pool over the token axis.
pub fn mix_pool(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(Error::dim("mix_pool: rank-2 input required"));
    }
    let (rows, c) = (x.shape()[0], x.shape()[1]);
    let mut maxv = x.data()[..c].to_vec();
    let mut meanv = vec![0.0; c];
    for r in 0..rows {
        for j in 0..c {
            let v = x.data()[r * c + j];
            if v > maxv[j] {
                maxv[j] = v;
            }
            meanv[j] += v;
        }
    }
    for j in 0..c {
        maxv[j] += meanv[j] / rows as f64;
    }
    Ok(Tensor::from_raw(vec![c], maxv))
}

/// `x_out = Σ_i 2^(i−1)·MixPool(x_i)` concatenated with the class token.
/// Features are the selected layers' patch-token sequences; the class token
/// is pooled nowhere and enters only through the concatenation.
pub fn fusion_head(features: &[&Tensor], class_token: &Tensor) -> Result<Tensor> {
    if features.is_empty() {
        return Err(Error::dim("fusion_head: no features"));
    }
    let c = features[0].shape()[1];
    if class_token.shape() != [c] {
        return Err(Error::dim(format!(
            "fusion_head: class token {:?} vs channel count {c}",
            class_token.shape()
        )));
    }
    let mut out = Tensor::zeros(&[c]);
    for (i, x) in features.iter().enumerate() {
        if x.rank() != 2 || x.shape()[1] != c {
            return Err(Error::dim(format!(
                "fusion_head: feature {i} has shape {:?}, expected G×{c}",
                x.shape()
            )));
        }
        out.axpy((1u64 << i) as f64, &mix_pool(x)?)?;
    }
    let mut data = out.into_data();
    data.extend_from_slice(class_token.data());
    Ok(Tensor::from_raw(vec![2 * c], data))
}
