//! Farthest point sampling.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Greedy farthest-point selection of `g` indices from an `N×3` tensor,
/// starting at `seed_idx`. Deterministic; distance ties break toward the
/// lowest index.
pub fn fps(points: &Tensor, g: usize, seed_idx: usize) -> Result<Vec<usize>> {
    let n = points.shape()[0];
    if g == 0 || g > n {
        return Err(Error::config(format!("fps: G = {g} outside [1, {n}]")));
    }
    if seed_idx >= n {
        return Err(Error::config(format!("fps: seed index {seed_idx} ≥ {n}")));
    }

    let mut selected = Vec::with_capacity(g);
    let mut min_sq = vec![f64::INFINITY; n];
    let mut current = seed_idx;
    selected.push(current);

    for _ in 1..g {
        let c = points.row(current);
        let mut best = 0;
        let mut best_d = f64::NEG_INFINITY;
        for (i, d) in min_sq.iter_mut().enumerate() {
            let p = points.row(i);
            let (dx, dy, dz) = (p[0] - c[0], p[1] - c[1], p[2] - c[2]);
            let sq = dx * dx + dy * dy + dz * dz;
            if sq < *d {
                *d = sq;
            }
            // Strict > keeps the lowest index on ties.
            if *d > best_d {
                best_d = *d;
                best = i;
            }
        }
        current = best;
        selected.push(current);
    }
    Ok(selected)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_corners() -> Tensor {
        Tensor::new(
            vec![4, 3],
            vec![
                0.0, 0.0, 0.0, //
                1.0, 0.0, 0.0, //
                0.0, 1.0, 0.0, //
                1.0, 1.0, 0.0,
            ],
        )
        .unwrap()
    }

    #[test]
    fn g_equals_one_returns_seed() {
        let pts = square_corners();
        assert_eq!(fps(&pts, 1, 2).unwrap(), vec![2]);
    }

    #[test]
    fn second_pick_is_opposite_corner() {
        // Exhaustively: the farthest point from (0,0,0) among the unit
        // square corners is (1,1,0), index 3.
        let pts = square_corners();
        assert_eq!(fps(&pts, 2, 0).unwrap(), vec![0, 3]);
    }

    #[test]
    fn g_equals_n_selects_all() {
        let pts = square_corners();
        let mut sel = fps(&pts, 4, 0).unwrap();
        sel.sort_unstable();
        assert_eq!(sel, vec![0, 1, 2, 3]);
    }

    #[test]
    fn g_above_n_is_config_error() {
        let pts = square_corners();
        assert!(fps(&pts, 5, 0).is_err());
    }

    #[test]
    fn ties_break_to_lowest_index() {
        // Two coincident candidates equidistant from the seed.
        let pts = Tensor::new(
            vec![3, 3],
            vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0],
        )
        .unwrap();
        assert_eq!(fps(&pts, 2, 0).unwrap(), vec![0, 1]);
    }
}
