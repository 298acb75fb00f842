//! Block-diagonal factors: `b` parameterized blocks on the diagonal.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::block::BlockParameterization;

/// A block-diagonal matrix `diag(B_1, …, B_b)` applied to row-token
/// features from the right. Blocks all share the shape
/// `(in_dim/b) × (out_dim/b)`; everything off the block diagonal is zero.
#[derive(Debug, Clone)]
pub struct BlockDiagonalFactor {
    b: usize,
    in_dim: usize,
    out_dim: usize,
    blocks: Vec<BlockParameterization>,
}

impl BlockDiagonalFactor {
    pub fn new(
        in_dim: usize,
        out_dim: usize,
        blocks: Vec<BlockParameterization>,
    ) -> Result<Self> {
        let b = blocks.len();
        if b == 0 {
            return Err(Error::config("factor needs at least one block"));
        }
        if in_dim % b != 0 || out_dim % b != 0 {
            return Err(Error::config(format!(
                "block count {b} does not divide dims {in_dim}×{out_dim}"
            )));
        }
        let (rows, cols) = (in_dim / b, out_dim / b);
        for blk in &blocks {
            blk.validate(rows, cols)?;
        }
        Ok(Self { b, in_dim, out_dim, blocks })
    }

    pub fn block_count(&self) -> usize {
        self.b
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn block_shape(&self) -> (usize, usize) {
        (self.in_dim / self.b, self.out_dim / self.b)
    }

    pub fn blocks(&self) -> &[BlockParameterization] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [BlockParameterization] {
        &mut self.blocks
    }

    /// Fast path `Y = X · diag(B_1, …, B_b)`: the columns of `X` are viewed
    /// as `(b, in_dim/b)` chunks and each chunk is multiplied by its block —
    /// a batched matmul over blocks. The full factor is never materialized.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 2 || x.shape()[1] != self.in_dim {
            return Err(Error::dim(format!(
                "factor {}×{} applied to {:?}",
                self.in_dim,
                self.out_dim,
                x.shape()
            )));
        }
        let g = x.shape()[0];
        let (s_in, s_out) = self.block_shape();
        let mut out = Tensor::zeros(&[g, self.out_dim]);
        for (i, blk) in self.blocks.iter().enumerate() {
            let dense = blk.materialize()?;
            // Chunk i of each row times block i.
            for r in 0..g {
                let src = &x.data()[r * self.in_dim + i * s_in..r * self.in_dim + (i + 1) * s_in];
                let dst_base = r * self.out_dim + i * s_out;
                for (l, &sv) in src.iter().enumerate() {
                    if sv == 0.0 {
                        continue;
                    }
                    let brow = &dense.data()[l * s_out..(l + 1) * s_out];
                    let dst = &mut out.data_mut()[dst_base..dst_base + s_out];
                    for (d, &bv) in dst.iter_mut().zip(brow) {
                        *d += sv * bv;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Dense `in_dim × out_dim` materialization; the reference path for
    /// oracles.
    pub fn materialize(&self) -> Result<Tensor> {
        let (s_in, s_out) = self.block_shape();
        let mut out = Tensor::zeros(&[self.in_dim, self.out_dim]);
        for (i, blk) in self.blocks.iter().enumerate() {
            let dense = blk.materialize()?;
            for r in 0..s_in {
                for c in 0..s_out {
                    out.set(&[i * s_in + r, i * s_out + c], dense.at(&[r, c]));
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn full_blocks(b: usize, rows: usize, cols: usize, rng: &mut Rng) -> Vec<BlockParameterization> {
        (0..b)
            .map(|_| BlockParameterization::Full {
                weight: Tensor::gaussian(&[rows, cols], 1.0, rng),
            })
            .collect()
    }

    #[test]
    fn one_by_one_blocks_scale_columns() {
        // b = d: the factor is a diagonal matrix.
        let blocks = (0..4)
            .map(|i| BlockParameterization::Full {
                weight: Tensor::filled(&[1, 1], (i + 1) as f64),
            })
            .collect();
        let f = BlockDiagonalFactor::new(4, 4, blocks).unwrap();
        let x = Tensor::filled(&[2, 4], 1.0);
        let y = f.apply(&x).unwrap();
        assert_eq!(y.row(0), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn single_block_is_plain_matmul() {
        let mut rng = Rng::seed_from_u64(1);
        let w = Tensor::gaussian(&[5, 7], 1.0, &mut rng);
        let f = BlockDiagonalFactor::new(
            5,
            7,
            vec![BlockParameterization::Full { weight: w.clone() }],
        )
        .unwrap();
        let x = Tensor::gaussian(&[3, 5], 1.0, &mut rng);
        let fast = f.apply(&x).unwrap();
        let dense = x.matmul(&w).unwrap();
        assert!(fast.max_abs_diff(&dense) < 1e-12);
    }

    #[test]
    fn fast_path_matches_materialization_oracle() {
        let mut rng = Rng::seed_from_u64(2);
        let blocks = full_blocks(4, 4, 4, &mut rng);
        let f = BlockDiagonalFactor::new(16, 16, blocks).unwrap();
        let x = Tensor::gaussian(&[5, 16], 1.0, &mut rng);
        let fast = f.apply(&x).unwrap();
        let oracle = x.matmul(&f.materialize().unwrap()).unwrap();
        assert!(fast.max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn materialization_is_exactly_block_diagonal() {
        let mut rng = Rng::seed_from_u64(3);
        let f = BlockDiagonalFactor::new(6, 12, full_blocks(3, 2, 4, &mut rng)).unwrap();
        let m = f.materialize().unwrap();
        for r in 0..6 {
            for c in 0..12 {
                if r / 2 != c / 4 {
                    assert_eq!(m.at(&[r, c]), 0.0);
                }
            }
        }
    }

    #[test]
    fn non_divisible_dims_rejected() {
        let mut rng = Rng::seed_from_u64(4);
        let blocks = full_blocks(3, 2, 2, &mut rng);
        assert!(matches!(
            BlockDiagonalFactor::new(7, 6, blocks),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn dimension_mismatch_on_apply() {
        let mut rng = Rng::seed_from_u64(5);
        let f = BlockDiagonalFactor::new(4, 4, full_blocks(2, 2, 2, &mut rng)).unwrap();
        let x = Tensor::zeros(&[3, 6]);
        assert!(matches!(f.apply(&x), Err(Error::Dimension(_))));
    }
}
