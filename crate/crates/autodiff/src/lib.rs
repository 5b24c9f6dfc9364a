//! Reverse-mode automatic differentiation over dense, row-major `f64` tensors.
//!
//! A [`Graph`] records operations on [`Var`] handles; [`Graph::backward`]
//! returns gradients for every leaf created with [`Graph::leaf`].

pub mod check;
mod graph;
pub mod ops;
pub mod optim;
mod tensor;

pub use graph::{BackwardFn, Gradients, Graph, Var};
pub use ops::conv::conv_out_size;
pub use ops::elementwise::{gelu, sigmoid, softplus, std_normal_cdf};
pub use ops::matmul::gemm;
pub use optim::Adam;
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
}

pub type Result<T> = std::result::Result<T, Error>;
