//! Dense `f64` tensors, differentiable primitives, Adam and a finite-difference oracle.

mod adam;
mod gradcheck;
pub mod layers;
pub mod ops;
mod tensor;

pub use adam::{AdamConfig, Parameter, Params};
pub use gradcheck::{finite_difference_gradient, relative_error};
pub use layers::{LayerNorm, Linear};
pub use tensor::{matmul_backward, Tensor};
