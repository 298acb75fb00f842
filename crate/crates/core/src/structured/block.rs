//! Block parameterizations: each diagonal block of a factor is either a
//! dense matrix or a low-rank / Kronecker decomposition of one.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How the blocks of a factor are parameterized. `JointLowRank` shares the
/// left factor of each block between the matching blocks of the L and R
/// factors, so the shared tensor is counted once per block pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BlockScheme {
    #[default]
    Full,
    /// `rank = None` uses the default `⌈min(rows, cols)/4⌉`.
    LowRank { rank: Option<usize> },
    Kronecker,
    JointLowRank { rank: Option<usize> },
}

impl BlockScheme {
    pub fn resolve_rank(&self, rows: usize, cols: usize) -> usize {
        match self {
            BlockScheme::LowRank { rank } | BlockScheme::JointLowRank { rank } => {
                rank.unwrap_or_else(|| rows.min(cols).div_ceil(4))
            }
            _ => 0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BlockScheme::Full => "full",
            BlockScheme::LowRank { .. } => "lowrank",
            BlockScheme::Kronecker => "kronecker",
            BlockScheme::JointLowRank { .. } => "joint",
        }
    }
}

/// Near-square factor split `n = a·b` with `a ≤ b` and `a` the largest
/// divisor of `n` not exceeding `√n`.
pub fn kron_split(n: usize) -> (usize, usize) {
    let mut a = 1;
    let mut d = 1;
    while d * d <= n {
        if n % d == 0 {
            a = d;
        }
        d += 1;
    }
    (a, n / a)
}

/// One parameterized block plus its constituent small tensors.
#[derive(Debug, Clone)]
pub enum BlockParameterization {
    Full { weight: Tensor },
    LowRank { u: Tensor, v: Tensor },
    /// `a ⊗ b` with `a: a1×a2`, `b: b1×b2`, `a1·b1 = rows`, `a2·b2 = cols`.
    Kronecker { a: Tensor, b: Tensor },
    /// Low-rank block whose `u` is shared with the matching block of the
    /// other factor.
    JointLowRank { u: Tensor, v: Tensor },
}

impl BlockParameterization {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            BlockParameterization::Full { weight } => (weight.shape()[0], weight.shape()[1]),
            BlockParameterization::LowRank { u, v }
            | BlockParameterization::JointLowRank { u, v } => (u.shape()[0], v.shape()[1]),
            BlockParameterization::Kronecker { a, b } => (
                a.shape()[0] * b.shape()[0],
                a.shape()[1] * b.shape()[1],
            ),
        }
    }

    pub fn validate(&self, rows: usize, cols: usize) -> Result<()> {
        let (r, c) = self.shape();
        if (r, c) != (rows, cols) {
            return Err(Error::config(format!(
                "block materializes to {r}×{c}, declared {rows}×{cols}"
            )));
        }
        match self {
            BlockParameterization::LowRank { u, v }
            | BlockParameterization::JointLowRank { u, v } => {
                let rank = u.shape()[1];
                if rank != v.shape()[0] {
                    return Err(Error::config(format!(
                        "low-rank factors disagree on rank: {} vs {}",
                        rank,
                        v.shape()[0]
                    )));
                }
                if rank > rows.min(cols) {
                    return Err(Error::config(format!(
                        "rank {rank} exceeds min({rows}, {cols})"
                    )));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Dense block: identity pass-through for `Full`, `U·V` for the
    /// low-rank forms, `A⊗B` for Kronecker.
    pub fn materialize(&self) -> Result<Tensor> {
        match self {
            BlockParameterization::Full { weight } => Ok(weight.clone()),
            BlockParameterization::LowRank { u, v }
            | BlockParameterization::JointLowRank { u, v } => u.matmul(v),
            BlockParameterization::Kronecker { a, b } => a.kron(b),
        }
    }

    /// Raw scalar count of the constituent tensors (a shared `u` is counted
    /// here; pair-level dedup happens in the Monarch accounting).
    pub fn raw_param_count(&self) -> usize {
        match self {
            BlockParameterization::Full { weight } => weight.numel(),
            BlockParameterization::LowRank { u, v }
            | BlockParameterization::JointLowRank { u, v } => u.numel() + v.numel(),
            BlockParameterization::Kronecker { a, b } => a.numel() + b.numel(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn lowrank_full_rank_with_identity_u_passes_through() {
        let b = Tensor::new(vec![3, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]).unwrap();
        let p = BlockParameterization::LowRank {
            u: Tensor::identity(3),
            v: b.clone(),
        };
        p.validate(3, 3).unwrap();
        assert_eq!(p.materialize().unwrap(), b);
    }

    #[test]
    fn kronecker_of_identities_is_identity() {
        let p = BlockParameterization::Kronecker {
            a: Tensor::identity(2),
            b: Tensor::identity(3),
        };
        assert_eq!(p.materialize().unwrap(), Tensor::identity(6));
    }

    #[test]
    fn kronecker_matches_definitional_oracle() {
        let mut rng = Rng::seed_from_u64(1);
        let a = Tensor::gaussian(&[2, 2], 1.0, &mut rng);
        let b = Tensor::gaussian(&[3, 3], 1.0, &mut rng);
        let p = BlockParameterization::Kronecker { a: a.clone(), b: b.clone() };
        let m = p.materialize().unwrap();
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..3 {
                    for l in 0..3 {
                        let expect = a.at(&[i, j]) * b.at(&[k, l]);
                        assert!((m.at(&[i * 3 + k, j * 3 + l]) - expect).abs() < 1e-14);
                    }
                }
            }
        }
    }

    #[test]
    fn shape_violations_are_config_errors() {
        let p = BlockParameterization::Full { weight: Tensor::zeros(&[2, 3]) };
        assert!(matches!(p.validate(3, 3), Err(Error::Config(_))));
        let lr = BlockParameterization::LowRank {
            u: Tensor::zeros(&[2, 3]),
            v: Tensor::zeros(&[3, 2]),
        };
        assert!(matches!(lr.validate(2, 2), Err(Error::Config(_))));
    }

    #[test]
    fn kron_split_is_near_square() {
        assert_eq!(kron_split(24), (4, 6));
        assert_eq!(kron_split(12), (3, 4));
        assert_eq!(kron_split(72), (8, 9));
        assert_eq!(kron_split(16), (4, 4));
        assert_eq!(kron_split(7), (1, 7));
        assert_eq!(kron_split(1), (1, 1));
    }

    #[test]
    fn default_rank_is_quarter_block() {
        let s = BlockScheme::LowRank { rank: None };
        assert_eq!(s.resolve_rank(24, 24), 6);
        assert_eq!(s.resolve_rank(12, 36), 3);
        assert_eq!(s.resolve_rank(2, 2), 1);
    }
}
