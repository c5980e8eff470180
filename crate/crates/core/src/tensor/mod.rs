//! Dense tensors and reverse-mode differentiation.

mod autodiff;
mod dense;
pub mod gradcheck;

pub use autodiff::{eval_no_grad, forward_op, OpKind, Tape, Var};
pub use dense::Tensor;

/// Default threshold below which [`Var::l2_normalize`] leaves a slice untouched.
pub const NORM_EPS: f64 = 1e-12;

/// Row-wise unit normalisation of a plain tensor.
pub fn l2_normalize(x: &Tensor, axis: usize, eps: f64) -> crate::Result<Tensor> {
    eval_no_grad(std::slice::from_ref(x), |_, v| v[0].l2_normalize(axis, eps))
}
