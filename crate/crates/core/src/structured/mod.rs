//! Structured matrices: the reshape-transpose permutation, block-diagonal
//! factors with dense / low-rank / Kronecker block parameterizations, and
//! the Monarch operator built from them.

mod block;
mod factor;
mod monarch;
mod perm;

pub use block::{kron_split, BlockParameterization, BlockScheme};
pub use factor::BlockDiagonalFactor;
pub use monarch::{monarch_param_count, monarch_permutations, MonarchMatrix};
pub use perm::{invert_permutation, make_permutation, perm_matrix, permute_cols};
