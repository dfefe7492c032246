//! Dense tensors with a small reverse-mode autodiff tape.

mod gradcheck;
mod graph;
mod params;
mod scalar;
mod tensor;

pub use gradcheck::{finite_difference_check, FdEntry, FdReport};
pub use graph::{Gradients, Graph, Var};
pub use params::{ParamSet, ParamVars};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    ShapeMismatch {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("{op}: non-finite output")]
    NonFinite { op: &'static str },
    #[error("loss must be scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("invalid shape {shape:?}")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} does not hold {len} elements")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("{op}: range {start}+{len} outside shape {shape:?}")]
    OutOfRange {
        op: &'static str,
        shape: Vec<usize>,
        start: usize,
        len: usize,
    },
    #[error("{op}: no inputs")]
    Empty { op: &'static str },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("gradient sets do not share a parameter list")]
    ParamMismatch,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(t(1, 3, &[0.0, 0.0, 0.0]));
        let y = g.softmax(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_for_large_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(&[6, 9], 300.0, &mut rng));
        let y = g.softmax(x).unwrap();
        for r in 0..6 {
            let s: f64 = g.value(y).row(r).iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn layer_norm_matches_hand_computation() {
        let mut g = Graph::new();
        let x = g.constant(t(1, 3, &[1.0, 2.0, 3.0]));
        let y = g.layer_norm(x).unwrap();
        // mean 2, population variance 2/3
        let inv = 1.0 / (2.0f64 / 3.0 + 1e-6).sqrt();
        let want = [-inv, 0.0, inv];
        for (a, b) in g.value(y).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn matmul_identity_left() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(3));
        let a = g.constant(t(3, 2, &[1.0, -2.0, 3.5, 4.0, 0.0, 6.0]));
        let y = g.matmul(i, a).unwrap();
        assert_eq!(g.value(y), g.value(a));
    }

    #[test]
    fn shape_mismatch_reports_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::<f64>::zeros(&[2, 3]));
        let b = g.constant(Tensor::<f64>::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(NumericsError::ShapeMismatch { op, shapes }) => {
                assert_eq!(op, "matmul");
                assert_eq!(shapes, vec![vec![2, 3], vec![2, 3]]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_finite_output_is_rejected_with_op_name() {
        let mut g = Graph::new();
        let a = g.constant(t(1, 1, &[1e300]));
        assert_eq!(
            g.scale(a, 1e300),
            Err(NumericsError::NonFinite { op: "scale" })
        );
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let w = g.param("w", &Tensor::from_vec(vec![1.0, 2.0]));
        let l = g.sum_squares(w).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn linear_gradient_is_row_sums_of_input() {
        // loss = sum(w x), w: 1×3, x: 3×2 -> dL/dw_j = sum_k x_jk
        let x = t(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut g = Graph::new();
        let w = g.param("w", &t(1, 3, &[0.3, -0.1, 0.7]));
        let xv = g.constant(x);
        let y = g.matmul(w, xv).unwrap();
        let l = g.sum(y).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[3.0, 7.0, 11.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let w = g.param("w", &Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(
            g.backward(w),
            Err(NumericsError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut g = Graph::new();
        let w = g.param("w", &Tensor::from_vec(vec![1.0]));
        let _u = g.param("unused", &Tensor::from_vec(vec![5.0, 6.0]));
        let l = g.sum_squares(w).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get("unused").unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn quadratic_gradcheck_is_exact() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        ps.insert("a", Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng)).unwrap();
        let report = finite_difference_check(&ps, 50, 1e-5, 9, |g, v| -> Result<Var, NumericsError> {
            let a = v.get("a")?;
            g.sum_squares(a)
        })
        .unwrap();
        assert!(report.max_rel_error() < 1e-8, "{report:?}");
        assert_eq!(report.total_probes(), 50);
    }

    #[test]
    fn empty_parameter_set_gives_empty_report() {
        let ps = ParamSet::<f64>::new();
        let report = finite_difference_check(&ps, 10, 1e-5, 0, |g, _| -> Result<Var, NumericsError> {
            let c = g.constant(Tensor::scalar(1.0));
            Ok(c)
        })
        .unwrap();
        assert!(report.is_empty());
    }
}
