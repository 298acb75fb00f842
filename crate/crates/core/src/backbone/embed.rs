//! Patch construction: FPS centers, nearest-point grouping, re-centering,
//! and the K-Rectify graph over centers. The learned part of the patch
//! embedding (shared MLP + max-pool) runs on the tape.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::{fps, KnnGraph, PointCloud};
use crate::tensor::Tensor;

use super::config::ModelConfig;

#[derive(Debug, Clone)]
pub struct PatchEmbedding {
    /// `(G·group_size) × 3`, each group re-centered on its FPS center.
    pub grouped: Tensor,
    /// `G × 3` patch centers.
    pub centers: Tensor,
    /// KNN graph over centers, shared by every K-Rectify in the stack.
    pub graph: Arc<KnnGraph>,
}

/// Deterministic patch construction; FPS always starts at index 0.
pub fn build_patches(cloud: &PointCloud, cfg: &ModelConfig) -> Result<PatchEmbedding> {
    let n = cloud.len();
    let g = cfg.patches;
    if n < g {
        return Err(Error::config(format!("cloud has {n} points, need ≥ {g} patches")));
    }
    if n < cfg.group_size {
        return Err(Error::config(format!(
            "cloud has {n} points, need ≥ group size {}",
            cfg.group_size
        )));
    }
    let points = cloud.points();
    let center_idx = fps(points, g, 0)?;

    let mut centers = Tensor::zeros(&[g, 3]);
    let mut grouped = Tensor::zeros(&[g * cfg.group_size, 3]);
    let mut dists: Vec<(f64, usize)> = Vec::with_capacity(n);
    for (pi, &ci) in center_idx.iter().enumerate() {
        let c = [points.at(&[ci, 0]), points.at(&[ci, 1]), points.at(&[ci, 2])];
        for d in 0..3 {
            centers.set(&[pi, d], c[d]);
        }
        dists.clear();
        for j in 0..n {
            let (dx, dy, dz) = (
                points.at(&[j, 0]) - c[0],
                points.at(&[j, 1]) - c[1],
                points.at(&[j, 2]) - c[2],
            );
            dists.push((dx * dx + dy * dy + dz * dz, j));
        }
        dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        for (slot, &(_, j)) in dists[..cfg.group_size].iter().enumerate() {
            for d in 0..3 {
                grouped.set(&[pi * cfg.group_size + slot, d], points.at(&[j, d]) - c[d]);
            }
        }
    }
    let graph = Arc::new(KnnGraph::build(&centers, cfg.knn_k)?);
    Ok(PatchEmbedding { grouped, centers, graph })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn small_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::tiny(3);
        cfg.patches = 4;
        cfg.group_size = 3;
        cfg.knn_k = 2;
        cfg
    }

    #[test]
    fn translation_leaves_groups_unchanged() {
        // Dyadic coordinates and an exactly representable shift keep the
        // arithmetic exact, so re-centered groups match bit for bit.
        let mut rng = Rng::seed_from_u64(1);
        let n = 16;
        let mut data = Vec::with_capacity(n * 3);
        for _ in 0..n * 3 {
            data.push((rng.next_below(64) as f64) * 0.25);
        }
        let cloud = PointCloud::new(Tensor::new(vec![n, 3], data.clone()).unwrap()).unwrap();
        let shifted: Vec<f64> = data.iter().map(|v| v + 2.5).collect();
        let cloud2 = PointCloud::new(Tensor::new(vec![n, 3], shifted).unwrap()).unwrap();

        let cfg = small_cfg();
        let a = build_patches(&cloud, &cfg).unwrap();
        let b = build_patches(&cloud2, &cfg).unwrap();
        assert_eq!(a.grouped.data(), b.grouped.data());
    }

    #[test]
    fn single_patch_is_recentred_cloud_subset() {
        let mut cfg = small_cfg();
        cfg.patches = 1;
        // K must stay below G; a 1-patch graph is impossible, so expect a
        // configuration error from the graph builder.
        let mut rng = Rng::seed_from_u64(2);
        let cloud = PointCloud::new(Tensor::gaussian(&[8, 3], 1.0, &mut rng)).unwrap();
        assert!(build_patches(&cloud, &cfg).is_err());
    }

    #[test]
    fn duplicate_points_produce_finite_patches() {
        let mut data = Vec::new();
        for i in 0..12 {
            let v = if i < 6 { 0.5 } else { -0.25 };
            data.extend_from_slice(&[v, v, v]);
        }
        let cloud = PointCloud::new(Tensor::new(vec![12, 3], data).unwrap()).unwrap();
        let cfg = small_cfg();
        let e = build_patches(&cloud, &cfg).unwrap();
        assert!(!e.grouped.has_non_finite());
        assert!(!e.graph.idw().has_non_finite());
    }

    #[test]
    fn too_few_points_is_config_error() {
        let cloud = PointCloud::new(Tensor::zeros(&[2, 3])).unwrap();
        assert!(build_patches(&cloud, &small_cfg()).is_err());
    }
}
