//! Dense tensors, reverse-mode differentiation and SGD.

pub mod checkpoint;
mod gemm;
pub mod gradcheck;
mod graph;
mod optim;
mod tensor;

pub use graph::{grad, sigmoid, Bound, Gradients, Graph, Var};
pub use optim::{apply_sgd, clip_grad_norm, sgd_step, LrSchedule};
pub(crate) use tensor::hex;
pub use tensor::{log_add, log_softmax, log_softmax_in_place, log_sum_exp, ParamSet, Tensor};

/// `c = a·b` for row-major `a` (m×k) and `b` (k×n).
pub(crate) fn gemm_into(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm::gemm(m, k, n, a, false, b, false, c, 0.0);
}
