//! KNN graphs over patch centers with inverse-distance weights.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Squared distances are clamped here before inversion so coincident
/// centers cannot produce infinite weights.
pub const IDW_EPS: f64 = 1e-8;

/// Which distance feeds the inverse-distance weights. The default follows
/// the squared form `1/‖p−p_i‖²`; `Euclidean` is the unsquared alternative,
/// selectable but never the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DistanceMode {
    #[default]
    SquaredEuclidean,
    Euclidean,
}

/// Per-token neighborhood structure over `G` patch centers: for each center
/// the `K` nearest *other* centers, their squared distances (row-sorted
/// ascending), and normalized IDW weights.
///
/// The query point is excluded from its own neighbor set; including it would
/// put a zero distance into the weight denominator.
#[derive(Debug, Clone)]
pub struct KnnGraph {
    centers: Tensor,
    k: usize,
    neighbor_idx: Vec<usize>, // G·K, row-major
    sq_dist: Tensor,          // G×K
    idw: Tensor,              // G×K
}

impl KnnGraph {
    pub fn build(centers: &Tensor, k: usize) -> Result<Self> {
        Self::build_with_mode(centers, k, DistanceMode::default())
    }

    pub fn build_with_mode(centers: &Tensor, k: usize, mode: DistanceMode) -> Result<Self> {
        if centers.rank() != 2 || centers.shape()[1] != 3 {
            return Err(Error::dim(format!(
                "centers must be G×3, got {:?}",
                centers.shape()
            )));
        }
        let g = centers.shape()[0];
        if k == 0 || k >= g {
            return Err(Error::config(format!(
                "knn: K = {k} must satisfy 1 ≤ K ≤ G−1 with G = {g}"
            )));
        }

        let mut neighbor_idx = Vec::with_capacity(g * k);
        let mut sq_dist = Vec::with_capacity(g * k);
        let mut idw = Vec::with_capacity(g * k);

        let mut cand: Vec<(f64, usize)> = Vec::with_capacity(g - 1);
        for i in 0..g {
            let p = centers.row(i);
            cand.clear();
            for j in 0..g {
                if j == i {
                    continue;
                }
                let q = centers.row(j);
                let (dx, dy, dz) = (p[0] - q[0], p[1] - q[1], p[2] - q[2]);
                cand.push((dx * dx + dy * dy + dz * dz, j));
            }
            // Ascending by distance, ties toward the lowest index.
            cand.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let row: Vec<f64> = cand[..k].iter().map(|c| c.0).collect();
            let weights = idw_weights_with_mode(&row, mode);
            for (c, w) in cand[..k].iter().zip(weights) {
                neighbor_idx.push(c.1);
                sq_dist.push(c.0);
                idw.push(w);
            }
        }

        Ok(Self {
            centers: centers.clone(),
            k,
            neighbor_idx,
            sq_dist: Tensor::new(vec![g, k], sq_dist)?,
            idw: Tensor::new(vec![g, k], idw)?,
        })
    }

    pub fn len(&self) -> usize {
        self.centers.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn centers(&self) -> &Tensor {
        &self.centers
    }

    pub fn neighbor(&self, token: usize, slot: usize) -> usize {
        self.neighbor_idx[token * self.k + slot]
    }

    pub fn neighbors(&self, token: usize) -> &[usize] {
        &self.neighbor_idx[token * self.k..(token + 1) * self.k]
    }

    pub fn sq_dist(&self) -> &Tensor {
        &self.sq_dist
    }

    pub fn idw(&self) -> &Tensor {
        &self.idw
    }

    pub fn idw_row(&self, token: usize) -> &[f64] {
        &self.idw.data()[token * self.k..(token + 1) * self.k]
    }

    /// Relabel the graph under a token permutation: token `t` of the new
    /// graph is token `perm[t]` of the old one.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let g = self.len();
        if perm.len() != g {
            return Err(Error::dim("permuted: permutation length mismatch"));
        }
        let mut inverse = vec![0usize; g];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        let mut centers = Tensor::zeros(&[g, 3]);
        let mut neighbor_idx = Vec::with_capacity(g * self.k);
        let mut sq = Vec::with_capacity(g * self.k);
        let mut idw = Vec::with_capacity(g * self.k);
        for new in 0..g {
            let old = perm[new];
            for d in 0..3 {
                centers.set(&[new, d], self.centers.at(&[old, d]));
            }
            for s in 0..self.k {
                neighbor_idx.push(inverse[self.neighbor(old, s)]);
                sq.push(self.sq_dist.at(&[old, s]));
                idw.push(self.idw.at(&[old, s]));
            }
        }
        Ok(Self {
            centers,
            k: self.k,
            neighbor_idx,
            sq_dist: Tensor::new(vec![g, self.k], sq)?,
            idw: Tensor::new(vec![g, self.k], idw)?,
        })
    }
}

/// Normalized inverse-distance weights `w_i = (1/d_i) / Σ_j (1/d_j)` from a
/// row of squared distances, clamped at [`IDW_EPS`] before inversion.
pub fn idw_weights(sq_dist_row: &[f64]) -> Vec<f64> {
    idw_weights_with_mode(sq_dist_row, DistanceMode::SquaredEuclidean)
}

pub fn idw_weights_with_mode(sq_dist_row: &[f64], mode: DistanceMode) -> Vec<f64> {
    let inv: Vec<f64> = sq_dist_row
        .iter()
        .map(|&sq| {
            let d = match mode {
                DistanceMode::SquaredEuclidean => sq.max(IDW_EPS),
                DistanceMode::Euclidean => sq.max(IDW_EPS).sqrt(),
            };
            1.0 / d
        })
        .collect();
    let total: f64 = inv.iter().sum();
    inv.into_iter().map(|v| v / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idw_direct_evaluation() {
        let w = idw_weights(&[1.0, 3.0]);
        assert!((w[0] - 0.75).abs() < 1e-15);
        assert!((w[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn idw_equal_distances_are_uniform() {
        let w = idw_weights(&[2.0; 5]);
        for v in w {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn idw_single_neighbor() {
        assert_eq!(idw_weights(&[7.0]), vec![1.0]);
    }

    #[test]
    fn idw_euclidean_mode_differs() {
        let sq = [1.0, 4.0];
        let squared = idw_weights_with_mode(&sq, DistanceMode::SquaredEuclidean);
        let plain = idw_weights_with_mode(&sq, DistanceMode::Euclidean);
        assert!((squared[0] - 0.8).abs() < 1e-15);
        assert!((plain[0] - 2.0 / 3.0).abs() < 1e-15);
    }

    fn collinear() -> Tensor {
        Tensor::new(vec![3, 3], vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 3.0, 0.0, 0.0]).unwrap()
    }

    #[test]
    fn collinear_nearest_neighbors() {
        let g = KnnGraph::build(&collinear(), 1).unwrap();
        assert_eq!(g.neighbor(0, 0), 1);
        assert_eq!(g.neighbor(1, 0), 0);
        assert_eq!(g.neighbor(2, 0), 1);
    }

    #[test]
    fn k_g_minus_one_contains_all_others() {
        let g = KnnGraph::build(&collinear(), 2).unwrap();
        for t in 0..3 {
            let mut nbrs: Vec<usize> = g.neighbors(t).to_vec();
            nbrs.sort_unstable();
            let expect: Vec<usize> = (0..3).filter(|&j| j != t).collect();
            assert_eq!(nbrs, expect);
        }
    }

    #[test]
    fn k_at_or_above_g_rejected() {
        assert!(KnnGraph::build(&collinear(), 3).is_err());
    }

    #[test]
    fn duplicated_centers_yield_finite_idw() {
        let pts =
            Tensor::new(vec![3, 3], vec![0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 1.0, 0.0, 0.0]).unwrap();
        let g = KnnGraph::build(&pts, 2).unwrap();
        assert!(!g.idw().has_non_finite());
        for t in 0..3 {
            let s: f64 = g.idw_row(t).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rows_sorted_ascending_and_self_excluded() {
        let pts = Tensor::new(
            vec![5, 3],
            vec![
                0.0, 0.0, 0.0, //
                0.1, 0.0, 0.0, //
                0.9, 0.4, 0.0, //
                0.3, 0.3, 0.3, //
                2.0, 2.0, 2.0,
            ],
        )
        .unwrap();
        let g = KnnGraph::build(&pts, 3).unwrap();
        for t in 0..5 {
            let row = &g.sq_dist().data()[t * 3..(t + 1) * 3];
            assert!(row.windows(2).all(|w| w[0] <= w[1]));
            assert!(row.iter().all(|&d| d >= 0.0));
            assert!(g.neighbors(t).iter().all(|&j| j != t));
        }
    }
}
