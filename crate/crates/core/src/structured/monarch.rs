//! The Monarch operator: two block-diagonal factors conjugated by
//! reshape-transpose permutations.
//!
//! Conventions (row-token features, operators applied from the right):
//!
//! * `d_s = min(d_in, d_out)`, `d_max = max(d_in, d_out)`; `R` is the square
//!   `d_s×d_s` factor and `L` the rectangular factor touching `d_max`.
//! * `d_in ≤ d_out`: `apply(X) = permute(blockdiag_L(permute(blockdiag_R(X),
//!   P_{d_s/b, b})), P_{b, d_max/b})` — R first, inverse reshape-transpose,
//!   L, then the output permutation.
//! * `d_in > d_out`: the exact transpose mirror, so the input-side factor is
//!   the one carrying `d_max`: permute by `P_{d_max/b, b}`, apply L
//!   (`d_max→d_s`), permute by `P_{b, d_s/b}`, apply R.
//!
//! `materialize` assembles the same product densely from explicit
//! permutation matrices and is the reference path for every oracle; the
//! fast path never builds the `d_in×d_out` matrix.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::block::{kron_split, BlockParameterization, BlockScheme};
use super::factor::BlockDiagonalFactor;
use super::perm::{make_permutation, perm_matrix, permute_cols};

#[derive(Debug, Clone)]
pub struct MonarchMatrix {
    d_in: usize,
    d_out: usize,
    b: usize,
    scheme: BlockScheme,
    r: BlockDiagonalFactor,
    l: BlockDiagonalFactor,
}

impl MonarchMatrix {
    /// Assemble from explicit factors. `r` must be the square `d_s×d_s`
    /// factor; `l` maps `d_s→d_max` when `d_in ≤ d_out` and `d_max→d_s`
    /// otherwise.
    pub fn new(
        d_in: usize,
        d_out: usize,
        b: usize,
        scheme: BlockScheme,
        r: BlockDiagonalFactor,
        l: BlockDiagonalFactor,
    ) -> Result<Self> {
        let d_s = d_in.min(d_out);
        let d_max = d_in.max(d_out);
        check_divisible(d_in, d_out, b)?;
        if r.block_count() != b || l.block_count() != b {
            return Err(Error::config(format!(
                "factors carry {} and {} blocks, expected {b}",
                r.block_count(),
                l.block_count()
            )));
        }
        if r.in_dim() != d_s || r.out_dim() != d_s {
            return Err(Error::config(format!(
                "R factor is {}×{}, expected {d_s}×{d_s}",
                r.in_dim(),
                r.out_dim()
            )));
        }
        let (l_in, l_out) = if d_in <= d_out { (d_s, d_max) } else { (d_max, d_s) };
        if l.in_dim() != l_in || l.out_dim() != l_out {
            return Err(Error::config(format!(
                "L factor is {}×{}, expected {l_in}×{l_out}",
                l.in_dim(),
                l.out_dim()
            )));
        }
        Ok(Self { d_in, d_out, b, scheme, r, l })
    }

    /// Fine-tuning initialization: R blocks drawn `N(0, sigma²)` (each
    /// constituent sub-factor for decomposed schemes), L blocks chosen so
    /// they materialize to exactly zero.
    pub fn init(
        d_in: usize,
        d_out: usize,
        b: usize,
        scheme: BlockScheme,
        sigma: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        Self::build(d_in, d_out, b, scheme, sigma, rng, true)
    }

    /// Fully random instance (both factors non-zero); used by equivalence
    /// oracles and benchmarks.
    pub fn random(
        d_in: usize,
        d_out: usize,
        b: usize,
        scheme: BlockScheme,
        sigma: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        Self::build(d_in, d_out, b, scheme, sigma, rng, false)
    }

    fn build(
        d_in: usize,
        d_out: usize,
        b: usize,
        scheme: BlockScheme,
        sigma: f64,
        rng: &mut Rng,
        zero_l: bool,
    ) -> Result<Self> {
        check_divisible(d_in, d_out, b)?;
        let d_s = d_in.min(d_out);
        let d_max = d_in.max(d_out);
        let (m_s, m_max) = (d_s / b, d_max / b);
        let (l_rows, l_cols) = if d_in <= d_out { (m_s, m_max) } else { (m_max, m_s) };

        let mut r_blocks = Vec::with_capacity(b);
        let mut l_blocks = Vec::with_capacity(b);
        for _ in 0..b {
            match scheme {
                BlockScheme::Full => {
                    r_blocks.push(BlockParameterization::Full {
                        weight: Tensor::gaussian(&[m_s, m_s], sigma, rng),
                    });
                    l_blocks.push(BlockParameterization::Full {
                        weight: if zero_l {
                            Tensor::zeros(&[l_rows, l_cols])
                        } else {
                            Tensor::gaussian(&[l_rows, l_cols], sigma, rng)
                        },
                    });
                }
                BlockScheme::LowRank { .. } => {
                    let rank = scheme.resolve_rank(m_s, m_s);
                    r_blocks.push(BlockParameterization::LowRank {
                        u: Tensor::gaussian(&[m_s, rank], sigma, rng),
                        v: Tensor::gaussian(&[rank, m_s], sigma, rng),
                    });
                    l_blocks.push(BlockParameterization::LowRank {
                        u: Tensor::gaussian(&[l_rows, rank], sigma, rng),
                        v: if zero_l {
                            Tensor::zeros(&[rank, l_cols])
                        } else {
                            Tensor::gaussian(&[rank, l_cols], sigma, rng)
                        },
                    });
                }
                BlockScheme::Kronecker => {
                    let (ra, rb) = kron_split(m_s);
                    r_blocks.push(BlockParameterization::Kronecker {
                        a: Tensor::gaussian(&[ra, ra], sigma, rng),
                        b: Tensor::gaussian(&[rb, rb], sigma, rng),
                    });
                    let (la1, lb1) = kron_split(l_rows);
                    let (la2, lb2) = kron_split(l_cols);
                    l_blocks.push(BlockParameterization::Kronecker {
                        a: Tensor::gaussian(&[la1, la2], sigma, rng),
                        b: if zero_l {
                            Tensor::zeros(&[lb1, lb2])
                        } else {
                            Tensor::gaussian(&[lb1, lb2], sigma, rng)
                        },
                    });
                }
                BlockScheme::JointLowRank { .. } => {
                    // One left factor per block pair, shared by R_i and L_i.
                    // For d_in > d_out the shared side is the d_s side of
                    // both blocks, so u pairs with L_i via transpose.
                    let rank = scheme.resolve_rank(m_s, m_s);
                    let u = Tensor::gaussian(&[m_s, rank], sigma, rng);
                    r_blocks.push(BlockParameterization::JointLowRank {
                        u: u.clone(),
                        v: Tensor::gaussian(&[rank, m_s], sigma, rng),
                    });
                    if d_in <= d_out {
                        l_blocks.push(BlockParameterization::JointLowRank {
                            u,
                            v: if zero_l {
                                Tensor::zeros(&[rank, l_cols])
                            } else {
                                Tensor::gaussian(&[rank, l_cols], sigma, rng)
                            },
                        });
                    } else {
                        // L block is m_max×m_s: share on the output side by
                        // storing (w: m_max×rank) · (uᵀ already rank×m_s)?
                        // Keep the shared tensor as the V side instead.
                        l_blocks.push(BlockParameterization::JointLowRank {
                            u: if zero_l {
                                Tensor::zeros(&[l_rows, rank])
                            } else {
                                Tensor::gaussian(&[l_rows, rank], sigma, rng)
                            },
                            v: u.transpose2d(),
                        });
                    }
                }
            }
        }
        let r = BlockDiagonalFactor::new(d_s, d_s, r_blocks)?;
        let l = BlockDiagonalFactor::new(
            if d_in <= d_out { d_s } else { d_max },
            if d_in <= d_out { d_max } else { d_s },
            l_blocks,
        )?;
        Self::new(d_in, d_out, b, scheme, r, l)
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn block_count(&self) -> usize {
        self.b
    }

    pub fn scheme(&self) -> BlockScheme {
        self.scheme
    }

    pub fn r_factor(&self) -> &BlockDiagonalFactor {
        &self.r
    }

    pub fn l_factor(&self) -> &BlockDiagonalFactor {
        &self.l
    }

    pub fn r_factor_mut(&mut self) -> &mut BlockDiagonalFactor {
        &mut self.r
    }

    pub fn l_factor_mut(&mut self) -> &mut BlockDiagonalFactor {
        &mut self.l
    }

    /// The two permutation descriptors `(inner, outer)` for the current
    /// shape. `inner` acts on the `d_s` channels between the factors,
    /// `outer` on the `d_max` channels at the large end.
    pub fn permutations(&self) -> (Vec<usize>, Vec<usize>) {
        monarch_permutations(self.d_in, self.d_out, self.b)
    }

    /// Fast path: `X (G×d_in) ↦ X·M (G×d_out)` without materializing `M`;
    /// two block-diagonal applications and two column permutations,
    /// `2·G·(d_s²/b + d_s·d_max/b)` multiply-adds.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 2 || x.shape()[1] != self.d_in {
            return Err(Error::dim(format!(
                "monarch {}→{} applied to {:?}",
                self.d_in,
                self.d_out,
                x.shape()
            )));
        }
        let (inner, outer) = self.permutations();
        if self.d_in <= self.d_out {
            let h = permute_cols(&self.r.apply(x)?, &inner);
            Ok(permute_cols(&self.l.apply(&h)?, &outer))
        } else {
            let h = self.l.apply(&permute_cols(x, &outer))?;
            self.r.apply(&permute_cols(&h, &inner))
        }
    }

    /// Dense `d_in×d_out` reference: factor materializations multiplied with
    /// explicit permutation matrices in the order the fast path applies
    /// them.
    pub fn materialize(&self) -> Result<Tensor> {
        let (inner, outer) = self.permutations();
        let r = self.r.materialize()?;
        let l = self.l.materialize()?;
        if self.d_in <= self.d_out {
            r.matmul(&perm_matrix(&inner))?
                .matmul(&l)?
                .matmul(&perm_matrix(&outer))
        } else {
            perm_matrix(&outer)
                .matmul(&l)?
                .matmul(&perm_matrix(&inner))?
                .matmul(&r)
        }
    }

    /// Number of trainable scalars held by this instance, counting each
    /// jointly-shared factor once per block pair.
    pub fn trainable_param_count(&self) -> usize {
        let mut total = 0;
        for (rb, lb) in self.r.blocks().iter().zip(self.l.blocks()) {
            total += rb.raw_param_count() + lb.raw_param_count();
            if let (
                BlockParameterization::JointLowRank { u, .. },
                BlockParameterization::JointLowRank { .. },
            ) = (rb, lb)
            {
                total -= u.numel();
            }
        }
        total
    }
}

/// `(inner, outer)` permutation pair shared by the fast path, the dense
/// materialization, and the tape-level forward.
pub fn monarch_permutations(d_in: usize, d_out: usize, b: usize) -> (Vec<usize>, Vec<usize>) {
    let d_s = d_in.min(d_out);
    let d_max = d_in.max(d_out);
    let (m_s, m_max) = (d_s / b, d_max / b);
    if d_in <= d_out {
        (make_permutation(m_s, b), make_permutation(b, m_max))
    } else {
        (make_permutation(b, m_s), make_permutation(m_max, b))
    }
}

fn check_divisible(d_in: usize, d_out: usize, b: usize) -> Result<()> {
    if b == 0 {
        return Err(Error::config("block count must be ≥ 1"));
    }
    let d_s = d_in.min(d_out);
    let d_max = d_in.max(d_out);
    if d_s % b != 0 || d_max % b != 0 {
        return Err(Error::config(format!(
            "block count {b} must divide both {d_s} and {d_max}"
        )));
    }
    Ok(())
}

/// Closed-form trainable parameter count for a Monarch of the given shape,
/// block count, and block scheme.
///
/// * `Full`: `d_s²/b + d_s·d_max/b` (so `2d²/b` in the square case)
/// * `LowRank(r)`: `r·(rows+cols)` per block, summed over both factors
/// * `Kronecker`: `a₁·a₂ + b₁·b₂` per block with near-square splits
/// * `JointLowRank(r)`: one shared `m_s×r` factor per block pair plus the
///   two `r×cols` sides
pub fn monarch_param_count(
    d_in: usize,
    d_out: usize,
    b: usize,
    scheme: BlockScheme,
) -> Result<usize> {
    check_divisible(d_in, d_out, b)?;
    let d_s = d_in.min(d_out);
    let d_max = d_in.max(d_out);
    let (m_s, m_max) = (d_s / b, d_max / b);
    let count = match scheme {
        BlockScheme::Full => d_s * d_s / b + d_s * d_max / b,
        BlockScheme::LowRank { .. } => {
            let rank = scheme.resolve_rank(m_s, m_s);
            if rank > m_s {
                return Err(Error::config(format!(
                    "rank {rank} exceeds block size {m_s}"
                )));
            }
            b * rank * (m_s + m_s) + b * rank * (m_s + m_max)
        }
        BlockScheme::Kronecker => {
            let (ra, rb) = kron_split(m_s);
            let (ca, cb) = kron_split(m_max);
            b * (ra * ra + rb * rb) + b * (ra * ca + rb * cb)
        }
        BlockScheme::JointLowRank { .. } => {
            let rank = scheme.resolve_rank(m_s, m_s);
            if rank > m_s {
                return Err(Error::config(format!(
                    "rank {rank} exceeds block size {m_s}"
                )));
            }
            b * (m_s * rank + rank * m_s + rank * m_max)
        }
    };
    Ok(count)
}
