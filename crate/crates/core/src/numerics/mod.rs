//! Dense kernels, activations and seeded randomness.

mod activations;
mod matrix;
mod rng;

pub use activations::{gelu, gelu_prime, sigmoid, silu, silu_prime, softmax_rows};
pub use matrix::Matrix;
pub use rng::Rng;

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn matrix_strategy(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
        proptest::collection::vec(-10.0f64..10.0, rows * cols)
            .prop_map(move |d| Matrix::from_vec(rows, cols, d).unwrap())
    }

    proptest! {
        #[test]
        fn matmul_is_outer_product_sum(a in matrix_strategy(4, 3), b in matrix_strategy(3, 5)) {
            let p = a.matmul(&b).unwrap();
            let mut acc = Matrix::zeros(4, 5);
            for i in 0..3 {
                acc.add_assign(&Matrix::outer(&a.col(i), b.row(i))).unwrap();
            }
            prop_assert!(p.max_abs_diff(&acc).unwrap() <= 1e-10);
        }

        #[test]
        fn rank_one_frobenius(u in proptest::collection::vec(-5.0f64..5.0, 1..8),
                              v in proptest::collection::vec(-5.0f64..5.0, 1..8)) {
            let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let f = Matrix::outer(&u, &v).frobenius_norm();
            let expected = nu * nv;
            prop_assert!((f - expected).abs() <= 1e-12 * expected.max(1e-300));
        }

        #[test]
        fn seeded_fills_reproduce(seed in any::<u64>()) {
            let a = super::Rng::new(seed).normal_matrix(3, 3, 1.0);
            let b = super::Rng::new(seed).normal_matrix(3, 3, 1.0);
            prop_assert_eq!(a.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                            b.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        }
    }
}
