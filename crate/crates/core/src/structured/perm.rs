//! The row-major ↔ column-major reshape-transpose permutation.

use crate::tensor::Tensor;

/// Permutation `P_{b,m}` of length `b·m`: reading the input as a `b×m`
/// row-major grid, the output walks it column-major, so
/// `out[j·b + i] = in[i·m + j]` for `i ∈ [0,b)`, `j ∈ [0,m)`.
///
/// The returned vector is an index map: `out[k] = in[perm[k]]`. Its inverse
/// is `P_{m,b}`, making the pair an involution.
pub fn make_permutation(b: usize, m: usize) -> Vec<usize> {
    let mut perm = vec![0usize; b * m];
    for i in 0..b {
        for j in 0..m {
            perm[j * b + i] = i * m + j;
        }
    }
    perm
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (k, &p) in perm.iter().enumerate() {
        inv[p] = k;
    }
    inv
}

/// Column permutation of a rank-2 tensor: `Y[:, k] = X[:, perm[k]]`.
pub fn permute_cols(x: &Tensor, perm: &[usize]) -> Tensor {
    debug_assert_eq!(x.rank(), 2);
    debug_assert_eq!(x.shape()[1], perm.len());
    let (rows, cols) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let src = &x.data()[r * cols..(r + 1) * cols];
        let dst = &mut out[r * cols..(r + 1) * cols];
        for (k, &p) in perm.iter().enumerate() {
            dst[k] = src[p];
        }
    }
    Tensor::from_raw(vec![rows, cols], out)
}

/// Dense matrix `Q` with `X·Q = permute_cols(X, perm)`, i.e.
/// `Q[perm[k], k] = 1`.
pub fn perm_matrix(perm: &[usize]) -> Tensor {
    let n = perm.len();
    let mut q = Tensor::zeros(&[n, n]);
    for (k, &p) in perm.iter().enumerate() {
        q.set(&[p, k], 1.0);
    }
    q
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn b_one_is_identity() {
        for m in [1, 2, 5] {
            let perm = make_permutation(1, m);
            assert_eq!(perm, (0..m).collect::<Vec<_>>());
        }
    }

    #[test]
    fn two_by_two_transpose_order() {
        // [x0, x1, x2, x3] viewed as 2×2 → column-major [x0, x2, x1, x3].
        let perm = make_permutation(2, 2);
        assert_eq!(perm, vec![0, 2, 1, 3]);
    }

    #[test]
    fn inverse_pairing_recovers_input() {
        let mut rng = Rng::seed_from_u64(1);
        let x = Tensor::gaussian(&[4, 6], 1.0, &mut rng);
        let fwd = make_permutation(2, 3);
        let back = make_permutation(3, 2);
        let round = permute_cols(&permute_cols(&x, &fwd), &back);
        assert_eq!(round.data(), x.data());
        assert_eq!(invert_permutation(&fwd), back);
    }

    #[test]
    fn perm_matrix_matches_permute_cols() {
        let mut rng = Rng::seed_from_u64(2);
        let x = Tensor::gaussian(&[3, 6], 1.0, &mut rng);
        let perm = make_permutation(2, 3);
        let via_matrix = x.matmul(&perm_matrix(&perm)).unwrap();
        assert_eq!(via_matrix.data(), permute_cols(&x, &perm).data());
    }
}
