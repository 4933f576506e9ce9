//! Dense f64 tensors with a tape-based reverse-mode autodiff graph.

mod grad_check;
mod graph;
mod kernels;
mod tensor;

pub use grad_check::{
    grad_check, grad_check_coords, grad_report, CoordCheck, GradReport, FD_RESOLUTION, FD_STEP,
};
pub use graph::{Gradients, Graph, Reduce, Unary, Var, ZERO_NORM};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
