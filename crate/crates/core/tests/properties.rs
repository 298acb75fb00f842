//! Property tests for the structural invariants: permutation involution,
//! oracle agreement for the matmuls, IDW normalization, K-Rectify
//! linearity, and the procedural/matrix-form equivalence.

use most_core::geometry::{build_k_matrix, idw_weights, k_rectify_apply, KnnGraph};
use most_core::rng::Rng;
use most_core::structured::{invert_permutation, make_permutation, permute_cols};
use most_core::tensor::Tensor;
use proptest::prelude::*;

fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for l in 0..k {
                acc += a.at(&[i, l]) * b.at(&[l, j]);
            }
            out.set(&[i, j], acc);
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn permutation_involution(b in 1usize..8, m in 1usize..8, seed in 0u64..1000) {
        let mut rng = Rng::seed_from_u64(seed);
        let x = Tensor::gaussian(&[3, b * m], 1.0, &mut rng);
        let fwd = make_permutation(b, m);
        let back = make_permutation(m, b);
        prop_assert_eq!(invert_permutation(&fwd), back.clone());
        let round = permute_cols(&permute_cols(&x, &fwd), &back);
        prop_assert_eq!(round.data(), x.data());
    }

    #[test]
    fn matmul_agrees_with_naive_oracle(
        m in 1usize..=16, k in 1usize..=16, n in 1usize..=16, seed in 0u64..1000
    ) {
        let mut rng = Rng::seed_from_u64(seed);
        let a = Tensor::gaussian(&[m, k], 1.0, &mut rng);
        let b = Tensor::gaussian(&[k, n], 1.0, &mut rng);
        let fast = a.matmul(&b).unwrap();
        prop_assert!(fast.max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
    }

    #[test]
    fn batched_matmul_agrees_with_loop(
        bt in 1usize..=4, m in 1usize..=8, k in 1usize..=8, n in 1usize..=8, seed in 0u64..1000
    ) {
        let mut rng = Rng::seed_from_u64(seed);
        let a = Tensor::gaussian(&[bt, m, k], 1.0, &mut rng);
        let b = Tensor::gaussian(&[bt, k, n], 1.0, &mut rng);
        let fast = a.batched_matmul(&b).unwrap();
        for i in 0..bt {
            let ai = Tensor::new(vec![m, k], a.data()[i*m*k..(i+1)*m*k].to_vec()).unwrap();
            let bi = Tensor::new(vec![k, n], b.data()[i*k*n..(i+1)*k*n].to_vec()).unwrap();
            let ci = naive_matmul(&ai, &bi);
            let slice = &fast.data()[i*m*n..(i+1)*m*n];
            for (x, y) in slice.iter().zip(ci.data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn idw_rows_normalize(k in 1usize..8, seed in 0u64..1000) {
        let mut rng = Rng::seed_from_u64(seed);
        let sq: Vec<f64> = (0..k).map(|_| rng.next_f64() * 4.0).collect();
        let w = idw_weights(&sq);
        let sum: f64 = w.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn k_rectify_is_linear(
        g in 4usize..12, k in 1usize..4, lambda in 0.0f64..1.5,
        a in -2.0f64..2.0, b in -2.0f64..2.0, seed in 0u64..1000
    ) {
        prop_assume!(k < g);
        let mut rng = Rng::seed_from_u64(seed);
        let centers = Tensor::gaussian(&[g, 3], 1.0, &mut rng);
        let graph = KnnGraph::build(&centers, k).unwrap();
        let x = Tensor::gaussian(&[g, 5], 1.0, &mut rng);
        let y = Tensor::gaussian(&[g, 5], 1.0, &mut rng);
        let combo = x.scale(a).add(&y.scale(b)).unwrap();
        let lhs = k_rectify_apply(&graph, lambda, &combo).unwrap();
        let rhs = k_rectify_apply(&graph, lambda, &x).unwrap().scale(a)
            .add(&k_rectify_apply(&graph, lambda, &y).unwrap().scale(b)).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn matrix_form_equals_procedural_form(
        g in 4usize..14, k in 1usize..5, lambda in -1.0f64..1.5, seed in 0u64..1000
    ) {
        prop_assume!(k < g);
        let mut rng = Rng::seed_from_u64(seed);
        let centers = Tensor::gaussian(&[g, 3], 1.0, &mut rng);
        let graph = KnnGraph::build(&centers, k).unwrap();
        let x = Tensor::gaussian(&[g, 6], 1.0, &mut rng);
        let sparse = build_k_matrix(&graph, lambda);
        let via_sparse = sparse.apply(&x).unwrap();
        let via_dense = sparse.to_dense().matmul(&x).unwrap();
        let procedural = k_rectify_apply(&graph, lambda, &x).unwrap();
        prop_assert!(via_sparse.max_abs_diff(&procedural) < 1e-12);
        prop_assert!(via_dense.max_abs_diff(&procedural) < 1e-12);
    }
}
