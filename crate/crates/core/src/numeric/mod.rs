//! Deterministic dense linear algebra with reverse-mode differentiation
//! and the Adam optimizer.

pub mod adam;
pub mod gradcheck;
pub mod matrix;
pub mod param;
pub mod tape;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{grad_check, GradCheckReport};
pub use matrix::Matrix;
pub use param::{BoundLinear, Linear, Parameter};
pub use tape::{cross_entropy, softmax_rows, Tape, Var};

#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    fn matrix_strategy(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Matrix> {
        proptest::collection::vec(lo..hi, rows * cols)
            .prop_map(move |data| Matrix::from_vec(rows, cols, data).unwrap())
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(m in (1usize..6, 1usize..6).prop_flat_map(|(r, c)| matrix_strategy(r, c, -50.0, 50.0)), tau in 0.1f64..10.0) {
            let p = softmax_rows(&m, tau).unwrap();
            for i in 0..p.rows() {
                let s: f64 = p.row(i).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12, "row sum {s}");
                prop_assert!(p.row(i).iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }

        #[test]
        fn matmul_is_associative(
            a in matrix_strategy(3, 4, -5.0, 5.0),
            b in matrix_strategy(4, 2, -5.0, 5.0),
            c in matrix_strategy(2, 5, -5.0, 5.0),
        ) {
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let scale = left.as_slice().iter().map(|v| v.abs()).fold(1.0, f64::max);
            prop_assert!(left.max_abs_diff(&right) / scale < 1e-9);
        }

        #[test]
        fn adam_zero_grad_fixpoint(data in proptest::collection::vec(-10.0f64..10.0, 6)) {
            let mut state = AdamState::new(0.01, 0.9, 0.999, 1e-8);
            let mut p = Parameter::new("p", Matrix::from_vec(2, 3, data).unwrap());
            let before = p.value.clone();
            adam_step(&mut state, &mut [&mut p]).unwrap();
            prop_assert_eq!(p.value, before);
        }
    }
}
