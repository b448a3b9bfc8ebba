//! Property tests for the algebraic invariants of the tensor and rotation
//! primitives, over randomized shapes and values.

use proptest::prelude::*;

use tuckattn_core::attention::softmax_rows;
use tuckattn_core::linalg::svd;
use tuckattn_core::rope::{rope_matrix, RopeConfig};
use tuckattn_core::streaming::streaming_attention;
use tuckattn_core::tensor::{fold, matricize, mode_product, Matrix, Tensor3};

fn tensor_strategy(max_dim: usize) -> impl Strategy<Value = Tensor3> {
    (1..=max_dim, 1..=max_dim, 1..=max_dim).prop_flat_map(|(a, b, c)| {
        proptest::collection::vec(-3.0f64..3.0, a * b * c)
            .prop_map(move |data| Tensor3::from_vec((a, b, c), data).unwrap())
    })
}

fn matrix_for_mode(t: &Tensor3, mode: usize, rows: usize, values: &[f64]) -> Matrix {
    let cols = t.dim(mode);
    let data: Vec<f64> = values.iter().cycle().take(rows * cols).copied().collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

proptest! {
    // Unfolding a mode product equals multiplying the unfolding.
    #[test]
    fn mode_product_commutes_with_matricization(
        t in tensor_strategy(5),
        mode in 1usize..=3,
        rows in 1usize..=4,
        values in proptest::collection::vec(-2.0f64..2.0, 1..=20),
    ) {
        let m = matrix_for_mode(&t, mode, rows, &values);
        let lhs = matricize(&mode_product(&t, &m, mode).unwrap(), mode).unwrap();
        let rhs = m.matmul(&matricize(&t, mode).unwrap());
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    // Products in distinct modes commute.
    #[test]
    fn mode_products_in_distinct_modes_commute(
        t in tensor_strategy(5),
        rows_a in 1usize..=4,
        rows_b in 1usize..=4,
        values in proptest::collection::vec(-2.0f64..2.0, 1..=20),
    ) {
        let a = matrix_for_mode(&t, 2, rows_a, &values);
        let b = matrix_for_mode(&t, 3, rows_b, &values);
        let ab = mode_product(&mode_product(&t, &a, 2).unwrap(), &b, 3).unwrap();
        let ba = mode_product(&mode_product(&t, &b, 3).unwrap(), &a, 2).unwrap();
        prop_assert!(ab.max_abs_diff(&ba) < 1e-12);
    }

    // Folding inverts unfolding exactly.
    #[test]
    fn fold_round_trips(t in tensor_strategy(5), mode in 1usize..=3) {
        let unfolded = matricize(&t, mode).unwrap();
        prop_assert_eq!(fold(&unfolded, mode, t.dims()).unwrap(), t);
    }

    // Softmax rows are probability vectors; causal rows stop at the diagonal.
    #[test]
    fn softmax_rows_are_distributions(
        n in 1usize..=6,
        values in proptest::collection::vec(-50.0f64..50.0, 1..=36),
        causal in proptest::bool::ANY,
    ) {
        let data: Vec<f64> = values.iter().cycle().take(n * n).copied().collect();
        let m = Matrix::from_vec(n, n, data).unwrap();
        let s = softmax_rows(&m, causal);
        for r in 0..n {
            let sum: f64 = s.row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            if causal {
                for c in (r + 1)..n {
                    prop_assert_eq!(s.get(r, c), 0.0);
                }
            }
        }
    }

    // Rotations at positions m and n compose to the rotation at m - n.
    #[test]
    fn rotation_group_property(
        half_dim in 1usize..=6,
        m in -64i64..64,
        n in -64i64..64,
    ) {
        let cfg = RopeConfig::with_default_base(2 * half_dim).unwrap();
        let lhs = rope_matrix(&cfg, m).matmul_transposed(&rope_matrix(&cfg, n));
        let rhs = rope_matrix(&cfg, m - n);
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    // Chunked online-softmax evaluation equals the naive path for any chunk
    // size and masking mode.
    #[test]
    fn streaming_equals_naive_for_any_chunk(
        n in 1usize..=10,
        chunk in 1usize..=14,
        causal in proptest::bool::ANY,
        values in proptest::collection::vec(-4.0f64..4.0, 1..=40),
    ) {
        let take = |count: usize, offset: usize| -> Vec<f64> {
            values.iter().cycle().skip(offset).take(count).copied().collect()
        };
        let q = Tensor3::from_vec((2, n, 3), take(2 * n * 3, 0)).unwrap();
        let k = Matrix::from_vec(n, 3, take(n * 3, 1)).unwrap();
        let v = Matrix::from_vec(n, 2, take(n * 2, 2)).unwrap();
        let got = streaming_attention(&q, &k, &v, chunk, 0.7, causal).unwrap();
        let mut want = Tensor3::zeros((2, n, 2));
        for i in 0..2 {
            let attn = softmax_rows(&q.slice1(i).matmul_transposed(&k).scale(0.7), causal);
            want.set_slice1(i, &attn.matmul(&v));
        }
        prop_assert!(got.max_abs_diff(&want) < 1e-12);
    }

    // Singular value decomposition reconstructs and stays orthonormal over
    // arbitrary (small) shapes, including rank-deficient tiled data.
    #[test]
    fn svd_reconstructs_arbitrary_matrices(
        rows in 1usize..=7,
        cols in 1usize..=7,
        values in proptest::collection::vec(-5.0f64..5.0, 1..=30),
    ) {
        let data: Vec<f64> = values.iter().cycle().take(rows * cols).copied().collect();
        let m = Matrix::from_vec(rows, cols, data).unwrap();
        let dec = svd(&m).unwrap();
        prop_assert!(dec.reconstruct().max_abs_diff(&m) < 1e-9 * (1.0 + m.max_abs()));
        prop_assert!(dec.u.gram_identity_deviation() < 1e-9);
        prop_assert!(dec.v.gram_identity_deviation() < 1e-9);
    }
}
