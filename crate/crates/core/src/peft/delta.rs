//! The Point Monarch delta: a Monarch channel mixer sandwiched between two
//! K-Rectify token mixes sharing one trainable λ.
//!
//! A delta's trainable tensors live in a [`ParamStore`] under
//! `{prefix}.delta.*`; [`MonarchLayout`] owns the naming scheme and provides
//! three consistent views of the same parameters: seeded initialization,
//! assembly into a pure [`MonarchMatrix`], and tape construction for
//! training.

use std::collections::HashMap;
use std::sync::Arc;

use crate::autodiff::{ops, Tape, ValueId};
use crate::error::{Error, Result};
use crate::geometry::{k_rectify_apply, KnnGraph};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::structured::{
    kron_split, monarch_param_count, monarch_permutations, BlockDiagonalFactor,
    BlockParameterization, BlockScheme, MonarchMatrix,
};
use crate::tensor::Tensor;

/// Spectral-norm-stabilizing init scale `σ = sqrt(min(d_in, d_out) / d_in²)`,
/// applied as written even when `d_in > d_out`.
pub fn sigma_init(d_in: usize, d_out: usize) -> f64 {
    (d_in.min(d_out) as f64).sqrt() / d_in as f64
}

/// Shape/scheme descriptor for a Monarch delta bound to a parameter prefix.
#[derive(Debug, Clone, Copy)]
pub struct MonarchLayout {
    pub d_in: usize,
    pub d_out: usize,
    pub b: usize,
    pub scheme: BlockScheme,
}

struct LayoutDims {
    m_s: usize,
    m_max: usize,
    /// L block shape in application order.
    l_rows: usize,
    l_cols: usize,
    rank: usize,
}

impl MonarchLayout {
    pub fn new(d_in: usize, d_out: usize, b: usize, scheme: BlockScheme) -> Result<Self> {
        monarch_param_count(d_in, d_out, b, scheme)?;
        Ok(Self { d_in, d_out, b, scheme })
    }

    fn dims(&self) -> LayoutDims {
        let d_s = self.d_in.min(self.d_out);
        let d_max = self.d_in.max(self.d_out);
        let (m_s, m_max) = (d_s / self.b, d_max / self.b);
        let (l_rows, l_cols) = if self.d_in <= self.d_out { (m_s, m_max) } else { (m_max, m_s) };
        LayoutDims { m_s, m_max, l_rows, l_cols, rank: self.scheme.resolve_rank(m_s, m_s) }
    }

    /// Trainable scalars: the Monarch count plus the λ scalar.
    pub fn delta_param_count(&self) -> usize {
        monarch_param_count(self.d_in, self.d_out, self.b, self.scheme)
            .expect("layout validated at construction")
            + 1
    }

    fn lambda_name(&self, prefix: &str) -> String {
        format!("{prefix}.delta.lambda")
    }

    /// All parameter names owned by this delta, λ first, shared joint
    /// factors listed once.
    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        let mut names = vec![self.lambda_name(prefix)];
        for j in 0..self.b {
            match self.scheme {
                BlockScheme::Full => {
                    names.push(format!("{prefix}.delta.r.{j}.w"));
                    names.push(format!("{prefix}.delta.l.{j}.w"));
                }
                BlockScheme::LowRank { .. } => {
                    names.push(format!("{prefix}.delta.r.{j}.u"));
                    names.push(format!("{prefix}.delta.r.{j}.v"));
                    names.push(format!("{prefix}.delta.l.{j}.u"));
                    names.push(format!("{prefix}.delta.l.{j}.v"));
                }
                BlockScheme::Kronecker => {
                    names.push(format!("{prefix}.delta.r.{j}.a"));
                    names.push(format!("{prefix}.delta.r.{j}.b"));
                    names.push(format!("{prefix}.delta.l.{j}.a"));
                    names.push(format!("{prefix}.delta.l.{j}.b"));
                }
                BlockScheme::JointLowRank { .. } => {
                    names.push(format!("{prefix}.delta.joint.{j}.u"));
                    names.push(format!("{prefix}.delta.r.{j}.v"));
                    if self.d_in <= self.d_out {
                        names.push(format!("{prefix}.delta.l.{j}.v"));
                    } else {
                        names.push(format!("{prefix}.delta.l.{j}.w"));
                    }
                }
            }
        }
        names
    }

    /// Insert freshly initialized delta parameters: R-side tensors drawn
    /// `N(0, σ²)` with σ from [`sigma_init`], the L side chosen so the
    /// materialized update is exactly zero, λ = 0. All are trainable.
    pub fn init_params(&self, store: &mut ParamStore, prefix: &str, rng: &mut Rng) -> Result<()> {
        let d = self.dims();
        let sigma = sigma_init(self.d_in, self.d_out);
        store.insert(self.lambda_name(prefix), Tensor::zeros(&[1]), true)?;
        for j in 0..self.b {
            match self.scheme {
                BlockScheme::Full => {
                    store.insert(
                        format!("{prefix}.delta.r.{j}.w"),
                        Tensor::gaussian(&[d.m_s, d.m_s], sigma, rng),
                        true,
                    )?;
                    store.insert(
                        format!("{prefix}.delta.l.{j}.w"),
                        Tensor::zeros(&[d.l_rows, d.l_cols]),
                        true,
                    )?;
                }
                BlockScheme::LowRank { .. } => {
                    store.insert(
                        format!("{prefix}.delta.r.{j}.u"),
                        Tensor::gaussian(&[d.m_s, d.rank], sigma, rng),
                        true,
                    )?;
                    store.insert(
                        format!("{prefix}.delta.r.{j}.v"),
                        Tensor::gaussian(&[d.rank, d.m_s], sigma, rng),
                        true,
                    )?;
                    store.insert(
                        format!("{prefix}.delta.l.{j}.u"),
                        Tensor::gaussian(&[d.l_rows, d.rank], sigma, rng),
                        true,
                    )?;
                    store.insert(
                        format!("{prefix}.delta.l.{j}.v"),
                        Tensor::zeros(&[d.rank, d.l_cols]),
                        true,
                    )?;
                }
                BlockScheme::Kronecker => {
                    let (ra, rb) = kron_split(d.m_s);
                    let (la1, lb1) = kron_split(d.l_rows);
                    let (la2, lb2) = kron_split(d.l_cols);
                    store.insert(
                        format!("{prefix}.delta.r.{j}.a"),
                        Tensor::gaussian(&[ra, ra], sigma, rng),
                        true,
                    )?;
                    store.insert(
                        format!("{prefix}.delta.r.{j}.b"),
                        Tensor::gaussian(&[rb, rb], sigma, rng),
                        true,
                    )?;
                    store.insert(
                        format!("{prefix}.delta.l.{j}.a"),
                        Tensor::gaussian(&[la1, la2], sigma, rng),
                        true,
                    )?;
                    store.insert(
                        format!("{prefix}.delta.l.{j}.b"),
                        Tensor::zeros(&[lb1, lb2]),
                        true,
                    )?;
                }
                BlockScheme::JointLowRank { .. } => {
                    store.insert(
                        format!("{prefix}.delta.joint.{j}.u"),
                        Tensor::gaussian(&[d.m_s, d.rank], sigma, rng),
                        true,
                    )?;
                    store.insert(
                        format!("{prefix}.delta.r.{j}.v"),
                        Tensor::gaussian(&[d.rank, d.m_s], sigma, rng),
                        true,
                    )?;
                    if self.d_in <= self.d_out {
                        store.insert(
                            format!("{prefix}.delta.l.{j}.v"),
                            Tensor::zeros(&[d.rank, d.l_cols]),
                            true,
                        )?;
                    } else {
                        store.insert(
                            format!("{prefix}.delta.l.{j}.w"),
                            Tensor::zeros(&[d.l_rows, d.rank]),
                            true,
                        )?;
                    }
                }
            }
        }
        Ok(())
    }

    /// Recover a layout from parameter names: returns `None` when no delta
    /// is present under `prefix`.
    pub fn detect(store: &ParamStore, prefix: &str, d_in: usize, d_out: usize) -> Option<Self> {
        if !store.contains(&format!("{prefix}.delta.lambda")) {
            return None;
        }
        let scheme = if store.contains(&format!("{prefix}.delta.joint.0.u")) {
            let rank = store.get(&format!("{prefix}.delta.joint.0.u")).ok()?.shape()[1];
            BlockScheme::JointLowRank { rank: Some(rank) }
        } else if store.contains(&format!("{prefix}.delta.r.0.w")) {
            BlockScheme::Full
        } else if store.contains(&format!("{prefix}.delta.r.0.u")) {
            let rank = store.get(&format!("{prefix}.delta.r.0.u")).ok()?.shape()[1];
            BlockScheme::LowRank { rank: Some(rank) }
        } else if store.contains(&format!("{prefix}.delta.r.0.a")) {
            BlockScheme::Kronecker
        } else {
            return None;
        };
        let probe = |j: usize| -> bool {
            store.contains(&format!("{prefix}.delta.r.{j}.w"))
                || store.contains(&format!("{prefix}.delta.r.{j}.u"))
                || store.contains(&format!("{prefix}.delta.r.{j}.a"))
                || store.contains(&format!("{prefix}.delta.r.{j}.v"))
        };
        let mut b = 0;
        while probe(b) {
            b += 1;
        }
        MonarchLayout::new(d_in, d_out, b, scheme).ok()
    }

    fn block_param(
        &self,
        store: &ParamStore,
        prefix: &str,
        side: &str,
        j: usize,
    ) -> Result<BlockParameterization> {
        let name = |suffix: &str| format!("{prefix}.delta.{side}.{j}.{suffix}");
        match self.scheme {
            BlockScheme::Full => Ok(BlockParameterization::Full {
                weight: store.get(&name("w"))?.clone(),
            }),
            BlockScheme::LowRank { .. } => Ok(BlockParameterization::LowRank {
                u: store.get(&name("u"))?.clone(),
                v: store.get(&name("v"))?.clone(),
            }),
            BlockScheme::Kronecker => Ok(BlockParameterization::Kronecker {
                a: store.get(&name("a"))?.clone(),
                b: store.get(&name("b"))?.clone(),
            }),
            BlockScheme::JointLowRank { .. } => {
                let shared = store.get(&format!("{prefix}.delta.joint.{j}.u"))?.clone();
                if side == "r" {
                    Ok(BlockParameterization::JointLowRank {
                        u: shared,
                        v: store.get(&name("v"))?.clone(),
                    })
                } else if self.d_in <= self.d_out {
                    Ok(BlockParameterization::JointLowRank {
                        u: shared,
                        v: store.get(&name("v"))?.clone(),
                    })
                } else {
                    Ok(BlockParameterization::JointLowRank {
                        u: store.get(&name("w"))?.clone(),
                        v: shared.transpose2d(),
                    })
                }
            }
        }
    }

    /// Build the pure-math delta from stored tensors.
    pub fn assemble(&self, store: &ParamStore, prefix: &str) -> Result<PointMonarchDelta> {
        let d = self.dims();
        let d_s = self.d_in.min(self.d_out);
        let d_max = self.d_in.max(self.d_out);
        let r_blocks: Vec<_> = (0..self.b)
            .map(|j| self.block_param(store, prefix, "r", j))
            .collect::<Result<_>>()?;
        let l_blocks: Vec<_> = (0..self.b)
            .map(|j| self.block_param(store, prefix, "l", j))
            .collect::<Result<_>>()?;
        let r = BlockDiagonalFactor::new(d_s, d_s, r_blocks)?;
        let l = BlockDiagonalFactor::new(d.l_rows * self.b, d.l_cols * self.b, l_blocks)?;
        debug_assert_eq!(l.in_dim() + l.out_dim(), d_s + d_max);
        let monarch = MonarchMatrix::new(self.d_in, self.d_out, self.b, self.scheme, r, l)?;
        let lambda = store.get(&self.lambda_name(prefix))?.item();
        Ok(PointMonarchDelta { monarch, lambda })
    }

    fn tape_blocks(
        &self,
        tape: &mut Tape,
        leaves: &HashMap<String, ValueId>,
        prefix: &str,
        side: &str,
    ) -> Result<Vec<ValueId>> {
        let leaf = |name: String| -> Result<ValueId> {
            leaves
                .get(&name)
                .copied()
                .ok_or_else(|| Error::config(format!("missing tape leaf `{name}`")))
        };
        let mut ids = Vec::with_capacity(self.b);
        for j in 0..self.b {
            let name = |suffix: &str| format!("{prefix}.delta.{side}.{j}.{suffix}");
            let id = match self.scheme {
                BlockScheme::Full => leaf(name("w"))?,
                BlockScheme::LowRank { .. } => {
                    let u = leaf(name("u"))?;
                    let v = leaf(name("v"))?;
                    ops::matmul(tape, u, v)?
                }
                BlockScheme::Kronecker => {
                    let a = leaf(name("a"))?;
                    let b = leaf(name("b"))?;
                    ops::kron(tape, a, b)?
                }
                BlockScheme::JointLowRank { .. } => {
                    let shared = leaf(format!("{prefix}.delta.joint.{j}.u"))?;
                    if side == "r" || self.d_in <= self.d_out {
                        let v = leaf(name("v"))?;
                        ops::matmul(tape, shared, v)?
                    } else {
                        let w = leaf(name("w"))?;
                        let shared_t = ops::transpose2(tape, shared)?;
                        ops::matmul(tape, w, shared_t)?
                    }
                }
            };
            ids.push(id);
        }
        Ok(ids)
    }

    /// Monarch channel mixer as a tape subgraph (no token mixing).
    pub fn tape_monarch(
        &self,
        tape: &mut Tape,
        x: ValueId,
        leaves: &HashMap<String, ValueId>,
        prefix: &str,
    ) -> Result<ValueId> {
        let d = self.dims();
        let (inner, outer) = monarch_permutations(self.d_in, self.d_out, self.b);
        let r_blocks = self.tape_blocks(tape, leaves, prefix, "r")?;
        let l_blocks = self.tape_blocks(tape, leaves, prefix, "l")?;
        if self.d_in <= self.d_out {
            let h = ops::block_diag_apply(tape, x, &r_blocks, d.m_s, d.m_s)?;
            let h = ops::permute_cols(tape, h, inner)?;
            let h = ops::block_diag_apply(tape, h, &l_blocks, d.m_s, d.m_max)?;
            ops::permute_cols(tape, h, outer)
        } else {
            let h = ops::permute_cols(tape, x, outer)?;
            let h = ops::block_diag_apply(tape, h, &l_blocks, d.m_max, d.m_s)?;
            let h = ops::permute_cols(tape, h, inner)?;
            ops::block_diag_apply(tape, h, &r_blocks, d.m_s, d.m_s)
        }
    }

    /// Full Point Monarch subgraph: token mix, channel mix, token mix, the
    /// two mixes sharing the layer's λ leaf.
    pub fn tape_forward(
        &self,
        tape: &mut Tape,
        x: ValueId,
        leaves: &HashMap<String, ValueId>,
        prefix: &str,
        graph: &Arc<KnnGraph>,
        offset: usize,
    ) -> Result<ValueId> {
        let lambda = leaves
            .get(&self.lambda_name(prefix))
            .copied()
            .ok_or_else(|| Error::config(format!("missing λ leaf for `{prefix}`")))?;
        let kx = ops::k_rectify(tape, x, lambda, Arc::clone(graph), offset)?;
        let mx = self.tape_monarch(tape, kx, leaves, prefix)?;
        ops::k_rectify(tape, mx, lambda, Arc::clone(graph), offset)
    }
}

/// A concrete Point Monarch update: channel-side Monarch plus the shared
/// rectification scalar. The graph is supplied per call, never stored.
#[derive(Debug, Clone)]
pub struct PointMonarchDelta {
    pub monarch: MonarchMatrix,
    pub lambda: f64,
}

impl PointMonarchDelta {
    /// `K → Monarch → K`. Token mixing and channel mixing act on different
    /// axes, so the two sides commute; this order matches the merged
    /// factorization.
    pub fn apply(&self, graph: &KnnGraph, x: &Tensor) -> Result<Tensor> {
        let kx = k_rectify_apply(graph, self.lambda, x)?;
        let mx = self.monarch.apply(&kx)?;
        k_rectify_apply(graph, self.lambda, &mx)
    }

    pub fn trainable_scalar_count(&self) -> usize {
        self.monarch.trainable_param_count() + 1
    }
}

/// Point Monarch application by name.
pub fn point_monarch_apply(
    delta: &PointMonarchDelta,
    graph: &KnnGraph,
    x: &Tensor,
) -> Result<Tensor> {
    delta.apply(graph, x)
}

/// Sparse-training layer: the Point Monarch output alone, with no frozen
/// base weight.
pub fn sparse_linear_forward(
    delta: &PointMonarchDelta,
    graph: &KnnGraph,
    x: &Tensor,
) -> Result<Tensor> {
    delta.apply(graph, x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(g: usize, seed: u64) -> KnnGraph {
        let mut rng = Rng::seed_from_u64(seed);
        let centers = Tensor::gaussian(&[g, 3], 1.0, &mut rng);
        KnnGraph::build(&centers, 3).unwrap()
    }

    #[test]
    fn sigma_matches_closed_form() {
        let s = sigma_init(384, 384);
        assert!((s - (1.0f64 / 384.0).sqrt()).abs() < 1e-12);
        assert!((s - 0.051_031).abs() < 1e-6);
        // Uses d_in in the denominator even when d_in > d_out.
        assert!((sigma_init(24, 8) - (8.0f64).sqrt() / 24.0).abs() < 1e-15);
    }

    #[test]
    fn lambda_zero_reduces_to_monarch_apply() {
        let mut rng = Rng::seed_from_u64(1);
        let monarch = MonarchMatrix::random(16, 16, 4, BlockScheme::Full, 1.0, &mut rng).unwrap();
        let delta = PointMonarchDelta { monarch: monarch.clone(), lambda: 0.0 };
        let g = graph(8, 2);
        let x = Tensor::gaussian(&[8, 16], 1.0, &mut rng);
        let via_delta = delta.apply(&g, &x).unwrap();
        let via_monarch = monarch.apply(&x).unwrap();
        assert!(via_delta.max_abs_diff(&via_monarch) < 1e-15);
    }

    #[test]
    fn zero_l_gives_zero_output_for_any_lambda() {
        let mut rng = Rng::seed_from_u64(3);
        let monarch = MonarchMatrix::init(16, 16, 4, BlockScheme::Full, 0.5, &mut rng).unwrap();
        let delta = PointMonarchDelta { monarch, lambda: 0.7 };
        let g = graph(6, 4);
        let x = Tensor::gaussian(&[6, 16], 1.0, &mut rng);
        assert_eq!(delta.apply(&g, &x).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn fast_path_matches_dense_composition_oracle() {
        let mut rng = Rng::seed_from_u64(5);
        let monarch = MonarchMatrix::random(16, 16, 4, BlockScheme::Full, 1.0, &mut rng).unwrap();
        let delta = PointMonarchDelta { monarch: monarch.clone(), lambda: 0.3 };
        let g = graph(8, 6);
        let x = Tensor::gaussian(&[8, 16], 1.0, &mut rng);
        let fast = delta.apply(&g, &x).unwrap();
        // Dense composition: K·X·M then K again, all materialized.
        let k = crate::geometry::build_k_matrix(&g, 0.3).to_dense();
        let dense = k
            .matmul(&k.matmul(&x).unwrap().matmul(&monarch.materialize().unwrap()).unwrap())
            .unwrap();
        assert!(fast.max_abs_diff(&dense) < 1e-12);
    }

    #[test]
    fn token_and_channel_mixing_commute() {
        let mut rng = Rng::seed_from_u64(7);
        let monarch = MonarchMatrix::random(8, 24, 2, BlockScheme::Full, 1.0, &mut rng).unwrap();
        let g = graph(6, 8);
        let x = Tensor::gaussian(&[6, 8], 1.0, &mut rng);
        let k_in = crate::geometry::build_k_matrix(&g, 0.4).to_dense();
        let m = monarch.materialize().unwrap();
        let mix_then_channel = k_in.matmul(&x).unwrap().matmul(&m).unwrap();
        let channel_then_mix = k_in.matmul(&x.matmul(&m).unwrap()).unwrap();
        assert!(mix_then_channel.max_abs_diff(&channel_then_mix) < 1e-12);
    }

    #[test]
    fn init_assemble_roundtrip_counts_and_zero_init() {
        let mut rng = Rng::seed_from_u64(9);
        for scheme in [
            BlockScheme::Full,
            BlockScheme::LowRank { rank: None },
            BlockScheme::Kronecker,
            BlockScheme::JointLowRank { rank: None },
        ] {
            for &(d_in, d_out) in &[(16usize, 16usize), (8, 24), (24, 8)] {
                let layout = MonarchLayout::new(d_in, d_out, 2, scheme).unwrap();
                let mut store = ParamStore::new();
                layout.init_params(&mut store, "layer", &mut rng).unwrap();
                assert_eq!(store.trainable_scalar_count(), layout.delta_param_count());
                for name in layout.param_names("layer") {
                    assert!(store.contains(&name), "missing `{name}`");
                }
                let delta = layout.assemble(&store, "layer").unwrap();
                assert_eq!(delta.lambda, 0.0);
                assert_eq!(
                    delta.monarch.materialize().unwrap().max_abs(),
                    0.0,
                    "{scheme:?} {d_in}→{d_out} not zero at init"
                );
                let detected = MonarchLayout::detect(&store, "layer", d_in, d_out).unwrap();
                assert_eq!(detected.b, 2);
                assert_eq!(detected.scheme.name(), scheme.name());
            }
        }
    }

    #[test]
    fn tape_monarch_matches_pure_apply() {
        let mut rng = Rng::seed_from_u64(11);
        for scheme in [
            BlockScheme::Full,
            BlockScheme::LowRank { rank: None },
            BlockScheme::Kronecker,
            BlockScheme::JointLowRank { rank: None },
        ] {
            for &(d_in, d_out) in &[(16usize, 16usize), (8, 24), (24, 8)] {
                let layout = MonarchLayout::new(d_in, d_out, 2, scheme).unwrap();
                let mut store = ParamStore::new();
                layout.init_params(&mut store, "m", &mut rng).unwrap();
                // Randomize the zero-initialized side so the check is not 0 == 0.
                for entry in store.entries_mut() {
                    if entry.tensor.max_abs() == 0.0 {
                        entry.tensor = Tensor::gaussian(entry.tensor.shape(), 0.8, &mut rng);
                    }
                }
                let delta = layout.assemble(&store, "m").unwrap();
                let x = Tensor::gaussian(&[5, d_in], 1.0, &mut rng);

                let mut tape = Tape::new();
                let mut leaves = HashMap::new();
                for e in store.entries() {
                    leaves.insert(e.name.clone(), tape.param(e.tensor.clone()));
                }
                let x_id = tape.constant(x.clone());
                let y_id = layout.tape_monarch(&mut tape, x_id, &leaves, "m").unwrap();
                let pure = delta.monarch.apply(&x).unwrap();
                assert!(
                    tape.value(y_id).max_abs_diff(&pure) < 1e-12,
                    "tape/pure mismatch for {scheme:?} {d_in}→{d_out}"
                );
            }
        }
    }
}
