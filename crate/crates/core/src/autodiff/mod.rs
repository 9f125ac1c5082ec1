//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The operation set is closed: broadcasting add/sub/mul and scaling,
//! batched matrix products, time-axis 1-D convolution (zero padded, stride
//! one, cross-correlation), softmax and log-softmax along an axis, sigmoid,
//! SiLU, softplus, exp, sum/mean reductions, L2 normalization along the last
//! axis, and the structural ops (reshape, permute, slice, concat, block
//! tridiagonal assembly). Every model layer is composed from these.
//!
//! ```
//! use dynstg::autodiff::Tape;
//! use dynstg::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(x).unwrap().item().unwrap(), 6.0);
//! ```

mod gradcheck;
pub mod kernels;
mod tape;

pub use gradcheck::{
    grad_check, relative_error, GradCheckConfig, GradCheckReport, ParamCheck, DEFAULT_EPSILON,
};
pub use tape::{NormGuard, Tape, Var};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::tensor::Tensor;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn silu_and_softplus_at_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0));
        let s = tape.silu(x);
        let p = tape.softplus(x);
        assert_eq!(tape.value(s).item().unwrap(), 0.0);
        assert!(close(tape.value(p).item().unwrap(), 2f64.ln(), 1e-15));
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2]));
        let s = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().item().unwrap(), 6.0);
    }

    #[test]
    fn silu_gradient_matches_central_difference() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(0.0));
        let y = tape.silu(x);
        tape.backward(y).unwrap();
        let h = 1e-6;
        let fd =
            (crate::autodiff::kernels::silu(h) - crate::autodiff::kernels::silu(-h)) / (2.0 * h);
        let g = tape.grad(x).unwrap().item().unwrap();
        assert!(close(g, fd, 1e-9));
        assert!(close(g, 0.5, 1e-15));
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![4], vec![0.3, -1.2, 2.0, 0.1]).unwrap());
        let s = tape.softmax(x, 0).unwrap();
        let total = tape.sum_all(s);
        tape.backward(total).unwrap();
        for g in tape.grad(x).unwrap().data() {
            assert!(g.abs() < 1e-15);
        }
    }

    #[test]
    fn backward_accumulates_until_zeroed() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().item().unwrap(), 8.0);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().item().unwrap(), 4.0);
    }

    #[test]
    fn backward_contract_errors() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::ones(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
        let c = tape.constant(Tensor::scalar(1.0));
        assert!(matches!(tape.backward(c), Err(Error::Contract(_))));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        match err {
            Error::Shape { lhs, rhs, .. } => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn softmax_over_empty_axis_is_domain_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 0]));
        assert!(matches!(tape.softmax(x, 1), Err(Error::Domain { .. })));
    }

    #[test]
    fn clamped_normalization_reaches_unit_norm() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 2], vec![3.0, 4.0, 1e-9, 0.0]).unwrap());
        let y = tape.l2_normalize(x, 1e-12, NormGuard::Clamp).unwrap();
        let d = tape.value(y).data();
        assert!(close(d[0], 0.6, 1e-15) && close(d[1], 0.8, 1e-15));
        assert!(close(d[2], 1.0, 1e-12));
    }

    #[test]
    fn detach_cuts_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let d = tape.detach(x);
        let y = tape.mul(x, d).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().item().unwrap(), 2.0);
    }

    #[test]
    fn block_tridiagonal_single_frame_is_diagonal_block() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_fn(&[2, 2], |i| (i[0] * 2 + i[1]) as f64));
        let t = tape.constant(Tensor::eye(2));
        let b = tape.block_tridiagonal(a, t, 1).unwrap();
        assert!(tape.value(b).bit_eq(tape.value(a)));
        assert!(tape.block_tridiagonal(a, t, 0).is_err());
    }
}
