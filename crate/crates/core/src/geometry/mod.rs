//! Point-cloud geometry: farthest point sampling, KNN graphs over patch
//! centers, inverse-distance weights, and K-Rectify token mixing in both
//! procedural and sparse-matrix form.

mod fps;
mod knn;
mod rectify;

pub use fps::fps;
pub use knn::{idw_weights, idw_weights_with_mode, DistanceMode, KnnGraph};
pub use rectify::{build_k_matrix, k_rectify_apply, local_feature_distance, SparseTokenMix};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A point cloud: `N×3` coordinates, unitless.
#[derive(Debug, Clone)]
pub struct PointCloud {
    points: Tensor,
}

impl PointCloud {
    pub fn new(points: Tensor) -> Result<Self> {
        if points.rank() != 2 || points.shape()[1] != 3 {
            return Err(Error::dim(format!(
                "point cloud must be N×3, got {:?}",
                points.shape()
            )));
        }
        if points.shape()[0] == 0 {
            return Err(Error::dim("point cloud must contain at least one point"));
        }
        if points.has_non_finite() {
            return Err(Error::numeric("point_cloud", "non-finite coordinate"));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false // construction requires N ≥ 1
    }

    pub fn points(&self) -> &Tensor {
        &self.points
    }

    /// Scale so the farthest point sits on the unit sphere. Pure rescaling:
    /// no centroid shift, so samples built around the origin keep their
    /// radial structure.
    pub fn normalize_unit_sphere(&mut self) {
        let n = self.len();
        let mut max_norm: f64 = 0.0;
        for i in 0..n {
            let r = self.points.row(i);
            max_norm = max_norm.max((r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt());
        }
        if max_norm > 0.0 {
            let inv = 1.0 / max_norm;
            for v in self.points.data_mut() {
                *v *= inv;
            }
        }
    }
}
