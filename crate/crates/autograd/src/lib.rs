//! Dense `f32` tensors, a recording tape with reverse-mode differentiation,
//! and an Adam optimiser. The operation set is closed: it covers exactly what
//! a small convolutional U-Net and its encoder need.

mod adam;
mod error;
mod gemm;
pub mod gradcheck;
mod kernels;
mod param;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use error::{AutogradError, Phase, Result};
pub use param::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
