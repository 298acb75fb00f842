//! K-Rectify: IDW-interpolated neighborhood rectification of token features,
//! in procedural form and as an explicit sparse operator `K = I + λ·A⊙D`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::knn::KnnGraph;

/// Procedural K-Rectify: for each token `g`, interpolate a new feature from
/// its KNN neighbors with IDW weights and add it scaled by `lambda`:
///
/// `out[g] = X[g] + lambda · Σ_i idw[g,i] · X[neighbor(g,i)]`
pub fn k_rectify_apply(graph: &KnnGraph, lambda: f64, x: &Tensor) -> Result<Tensor> {
    let g = graph.len();
    if x.rank() != 2 || x.shape()[0] != g {
        return Err(Error::dim(format!(
            "k_rectify_apply: features {:?} do not match graph with G = {g}",
            x.shape()
        )));
    }
    let c = x.shape()[1];
    let mut out = x.clone();
    if lambda == 0.0 {
        return Ok(out);
    }
    for t in 0..g {
        let weights = graph.idw_row(t);
        let nbrs = graph.neighbors(t);
        let base = t * c;
        for (&n, &w) in nbrs.iter().zip(weights) {
            let scale = lambda * w;
            let src = &x.data()[n * c..(n + 1) * c];
            let dst = &mut out.data_mut()[base..base + c];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }
    Ok(out)
}

/// Sparse `G×G` token-mixing operator stored as `(row, col, weight)`
/// triples. Representing `K = I + λ·A⊙D` it holds the `G` diagonal ones
/// plus `K·G` off-diagonal entries.
#[derive(Debug, Clone)]
pub struct SparseTokenMix {
    g: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl SparseTokenMix {
    pub fn size(&self) -> usize {
        self.g
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    /// `Y = S·X` for row-token features `X (G×C)`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 2 || x.shape()[0] != self.g {
            return Err(Error::dim(format!(
                "sparse mix of size {} applied to {:?}",
                self.g,
                x.shape()
            )));
        }
        let c = x.shape()[1];
        let mut out = Tensor::zeros(&[self.g, c]);
        for &(r, col, w) in &self.entries {
            let src = &x.data()[col * c..(col + 1) * c];
            let dst = &mut out.data_mut()[r * c..(r + 1) * c];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += w * s;
            }
        }
        Ok(out)
    }

    pub fn to_dense(&self) -> Tensor {
        let mut out = Tensor::zeros(&[self.g, self.g]);
        for &(r, c, w) in &self.entries {
            let v = out.at(&[r, c]) + w;
            out.set(&[r, c], v);
        }
        out
    }
}

/// Matrix form of K-Rectify: diagonal ones plus `lambda·idw[g,i]` at each
/// `(g, neighbor(g,i))`. At `lambda = 0` only the diagonal is stored.
pub fn build_k_matrix(graph: &KnnGraph, lambda: f64) -> SparseTokenMix {
    let g = graph.len();
    let mut entries = Vec::with_capacity(g + if lambda == 0.0 { 0 } else { g * graph.k() });
    for t in 0..g {
        entries.push((t, t, 1.0));
        if lambda != 0.0 {
            for (s, &n) in graph.neighbors(t).iter().enumerate() {
                entries.push((t, n, lambda * graph.idw_row(t)[s]));
            }
        }
    }
    SparseTokenMix { g, entries }
}

/// Mean ℓ2 distance between each token's features and its KNN neighbors'
/// features; the smoothing diagnostic.
pub fn local_feature_distance(graph: &KnnGraph, x: &Tensor) -> Result<f64> {
    let g = graph.len();
    if x.rank() != 2 || x.shape()[0] != g {
        return Err(Error::dim(format!(
            "local_feature_distance: features {:?} vs G = {g}",
            x.shape()
        )));
    }
    let c = x.shape()[1];
    let mut total = 0.0;
    for t in 0..g {
        let xt = &x.data()[t * c..(t + 1) * c];
        for &n in graph.neighbors(t) {
            let xn = &x.data()[n * c..(n + 1) * c];
            let sq: f64 = xt.iter().zip(xn).map(|(a, b)| (a - b) * (a - b)).sum();
            total += sq.sqrt();
        }
    }
    Ok(total / (g * graph.k()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn mutual_pair() -> KnnGraph {
        let pts = Tensor::new(vec![2, 3], vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        KnnGraph::build(&pts, 1).unwrap()
    }

    fn random_graph(g: usize, k: usize, seed: u64) -> KnnGraph {
        let mut rng = Rng::seed_from_u64(seed);
        let centers = Tensor::gaussian(&[g, 3], 1.0, &mut rng);
        KnnGraph::build(&centers, k).unwrap()
    }

    #[test]
    fn lambda_zero_is_identity() {
        let g = random_graph(8, 3, 1);
        let mut rng = Rng::seed_from_u64(2);
        let x = Tensor::gaussian(&[8, 5], 1.0, &mut rng);
        let y = k_rectify_apply(&g, 0.0, &x).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn mutual_sole_neighbors_sum_features() {
        let g = mutual_pair();
        let x = Tensor::new(vec![2, 2], vec![1.0, 2.0, 10.0, 20.0]).unwrap();
        let y = k_rectify_apply(&g, 1.0, &x).unwrap();
        assert_eq!(y.row(0), &[11.0, 22.0]);
        assert_eq!(y.row(1), &[11.0, 22.0]);
    }

    #[test]
    fn constant_field_scales_by_one_plus_lambda() {
        let g = random_graph(10, 4, 3);
        let x = Tensor::filled(&[10, 7], 2.5);
        let y = k_rectify_apply(&g, 0.4, &x).unwrap();
        for &v in y.data() {
            assert!((v - 1.4 * 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn k_matrix_lambda_zero_is_identity_with_g_nonzeros() {
        let g = random_graph(6, 2, 4);
        let s = build_k_matrix(&g, 0.0);
        assert_eq!(s.nnz(), 6);
        assert_eq!(s.to_dense(), Tensor::identity(6));
    }

    #[test]
    fn k_matrix_mutual_pair_hand_values() {
        let g = mutual_pair();
        let s = build_k_matrix(&g, 0.5);
        let dense = s.to_dense();
        assert_eq!(dense.data(), &[1.0, 0.5, 0.5, 1.0]);
    }

    #[test]
    fn matrix_and_procedural_forms_agree() {
        let g = random_graph(12, 4, 5);
        let mut rng = Rng::seed_from_u64(6);
        let x = Tensor::gaussian(&[12, 9], 1.0, &mut rng);
        let s = build_k_matrix(&g, 0.7);
        let via_matrix = s.apply(&x).unwrap();
        let via_dense = s.to_dense().matmul(&x).unwrap();
        let procedural = k_rectify_apply(&g, 0.7, &x).unwrap();
        assert!(via_matrix.max_abs_diff(&procedural) < 1e-12);
        assert!(via_dense.max_abs_diff(&procedural) < 1e-12);
        assert_eq!(s.nnz(), 12 + 12 * 4);
    }

    #[test]
    fn identical_features_have_zero_distance() {
        let g = random_graph(9, 3, 7);
        let x = Tensor::filled(&[9, 4], 1.25);
        assert_eq!(local_feature_distance(&g, &x).unwrap(), 0.0);
    }

    #[test]
    fn opposed_unit_features_have_distance_two() {
        let g = mutual_pair();
        let x = Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, -1.0, 0.0, 0.0]).unwrap();
        assert!((local_feature_distance(&g, &x).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn rectification_smooths_random_features() {
        // Monte-Carlo trend: smoothing lowers the diagnostic in at least
        // 19 of 20 seeds.
        let mut wins = 0;
        for seed in 0..20 {
            let g = random_graph(16, 4, 100 + seed);
            let mut rng = Rng::seed_from_u64(200 + seed);
            let x = Tensor::gaussian(&[16, 8], 1.0, &mut rng);
            let before = local_feature_distance(&g, &x).unwrap();
            let after =
                local_feature_distance(&g, &k_rectify_apply(&g, 0.5, &x).unwrap()).unwrap();
            if after < before {
                wins += 1;
            }
        }
        assert!(wins >= 19, "smoothing won only {wins}/20 seeds");
    }

    #[test]
    fn permutation_equivariance() {
        let g = random_graph(10, 3, 8);
        let mut rng = Rng::seed_from_u64(9);
        let x = Tensor::gaussian(&[10, 6], 1.0, &mut rng);
        let perm: Vec<usize> = vec![3, 1, 4, 0, 9, 2, 7, 8, 5, 6];

        let y = k_rectify_apply(&g, 0.6, &x).unwrap();
        let mut x_perm = Tensor::zeros(&[10, 6]);
        let mut y_perm_expect = Tensor::zeros(&[10, 6]);
        for (new, &old) in perm.iter().enumerate() {
            for c in 0..6 {
                x_perm.set(&[new, c], x.at(&[old, c]));
                y_perm_expect.set(&[new, c], y.at(&[old, c]));
            }
        }
        let g_perm = g.permuted(&perm).unwrap();
        let y_perm = k_rectify_apply(&g_perm, 0.6, &x_perm).unwrap();
        assert!(y_perm.max_abs_diff(&y_perm_expect) < 1e-12);
    }
}
