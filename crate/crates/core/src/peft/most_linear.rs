//! A frozen dense linear layer reparameterized with a Point Monarch update,
//! plus its inference-time merged forms.

use crate::error::{Error, Result};
use crate::geometry::{k_rectify_apply, KnnGraph};
use crate::rng::Rng;
use crate::structured::{BlockScheme, MonarchMatrix};
use crate::tensor::Tensor;

use super::delta::{sigma_init, PointMonarchDelta};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerMode {
    Train,
    MergedDropK,
    MergedExact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeMode {
    /// Fold the channel-side Monarch into `W₀` and drop the token mixes;
    /// a single dense matmul, no graph needed. Exact iff λ = 0.
    DropK,
    /// Keep the two sparse token mixes around the materialized update;
    /// reproduces the training forward at `K·G` extra multiply-adds per
    /// side.
    Exact,
}

/// `W₀` (frozen) + bias (frozen) + trainable Point Monarch delta.
#[derive(Debug, Clone)]
pub struct MostLinear {
    pub w0: Tensor,
    pub bias: Option<Tensor>,
    pub delta: PointMonarchDelta,
    pub mode: LayerMode,
}

impl MostLinear {
    pub fn new(w0: Tensor, bias: Option<Tensor>, delta: PointMonarchDelta) -> Result<Self> {
        if w0.rank() != 2 {
            return Err(Error::dim("MostLinear: W₀ must be rank-2"));
        }
        let (d_in, d_out) = (w0.shape()[0], w0.shape()[1]);
        if delta.monarch.d_in() != d_in || delta.monarch.d_out() != d_out {
            return Err(Error::dim(format!(
                "delta is {}→{}, W₀ is {d_in}→{d_out}",
                delta.monarch.d_in(),
                delta.monarch.d_out()
            )));
        }
        if let Some(b) = &bias {
            if b.shape() != [d_out] {
                return Err(Error::dim("MostLinear: bias must match d_out"));
            }
        }
        Ok(Self { w0, bias, delta, mode: LayerMode::Train })
    }

    fn base(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = x.matmul(&self.w0)?;
        if let Some(b) = &self.bias {
            let d_out = b.shape()[0];
            for (i, v) in y.data_mut().iter_mut().enumerate() {
                *v += b.data()[i % d_out];
            }
        }
        Ok(y)
    }

    /// Training forward: `X·W₀ (+bias) + Δ(X)`.
    pub fn forward_train(&self, graph: &KnnGraph, x: &Tensor) -> Result<Tensor> {
        if self.mode != LayerMode::Train {
            return Err(Error::Usage(
                "most_forward called on a merged layer; use the merged forward".into(),
            ));
        }
        let mut y = self.base(x)?;
        y.axpy(1.0, &self.delta.apply(graph, x)?)?;
        Ok(y)
    }

    /// Produce the inference layer for the chosen merge mode.
    pub fn merge(&self, mode: MergeMode) -> Result<MergedLinear> {
        let delta_dense = self.delta.monarch.materialize()?;
        match mode {
            MergeMode::DropK => {
                let mut w = self.w0.clone();
                w.axpy(1.0, &delta_dense)?;
                Ok(MergedLinear::Dense { w, bias: self.bias.clone() })
            }
            MergeMode::Exact => Ok(MergedLinear::Exact {
                w0: self.w0.clone(),
                bias: self.bias.clone(),
                delta_dense,
                lambda: self.delta.lambda,
            }),
        }
    }
}

/// Build a MoST layer around a frozen weight: L = 0, R ~ N(0, σ²) with
/// σ = sqrt(min(d_in, d_out)/d_in²), λ = 0, so the layer output equals the
/// frozen layer output exactly at initialization.
pub fn init_most(
    w0: Tensor,
    bias: Option<Tensor>,
    b: usize,
    scheme: BlockScheme,
    seed: u64,
) -> Result<MostLinear> {
    if w0.rank() != 2 {
        return Err(Error::dim("init_most: W₀ must be rank-2"));
    }
    let (d_in, d_out) = (w0.shape()[0], w0.shape()[1]);
    let mut rng = Rng::seed_from_u64(seed);
    let monarch = MonarchMatrix::init(d_in, d_out, b, scheme, sigma_init(d_in, d_out), &mut rng)?;
    MostLinear::new(w0, bias, PointMonarchDelta { monarch, lambda: 0.0 })
}

/// Training-mode forward by name.
pub fn most_forward(layer: &MostLinear, graph: &KnnGraph, x: &Tensor) -> Result<Tensor> {
    layer.forward_train(graph, x)
}

/// Inference layer produced by [`MostLinear::merge`].
#[derive(Debug, Clone)]
pub enum MergedLinear {
    Dense {
        w: Tensor,
        bias: Option<Tensor>,
    },
    Exact {
        w0: Tensor,
        bias: Option<Tensor>,
        delta_dense: Tensor,
        lambda: f64,
    },
}

impl MergedLinear {
    pub fn forward(&self, graph: Option<&KnnGraph>, x: &Tensor) -> Result<Tensor> {
        match self {
            MergedLinear::Dense { w, bias } => {
                let mut y = x.matmul(w)?;
                if let Some(b) = bias {
                    let d_out = b.shape()[0];
                    for (i, v) in y.data_mut().iter_mut().enumerate() {
                        *v += b.data()[i % d_out];
                    }
                }
                Ok(y)
            }
            MergedLinear::Exact { w0, bias, delta_dense, lambda } => {
                let graph = graph.ok_or_else(|| {
                    Error::Usage("exact-mode inference requires the token graph".into())
                })?;
                let mut y = x.matmul(w0)?;
                if let Some(b) = bias {
                    let d_out = b.shape()[0];
                    for (i, v) in y.data_mut().iter_mut().enumerate() {
                        *v += b.data()[i % d_out];
                    }
                }
                let kx = k_rectify_apply(graph, *lambda, x)?;
                let update = k_rectify_apply(graph, *lambda, &kx.matmul(delta_dense)?)?;
                y.axpy(1.0, &update)?;
                Ok(y)
            }
        }
    }
}

/// λ-induced relative deviation `‖exact − dropK‖ / ‖exact‖` of one layer on
/// a batch of inputs; zero exactly when λ = 0.
pub fn merge_deviation(layer: &MostLinear, graph: &KnnGraph, xs: &[Tensor]) -> Result<f64> {
    let exact = layer.merge(MergeMode::Exact)?;
    let dropk = layer.merge(MergeMode::DropK)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for x in xs {
        let ye = exact.forward(Some(graph), x)?;
        let yd = dropk.forward(None, x)?;
        num += ye.sub(&yd)?.frobenius_norm().powi(2);
        den += ye.frobenius_norm().powi(2);
    }
    Ok(num.sqrt() / den.sqrt().max(1e-300))
}
