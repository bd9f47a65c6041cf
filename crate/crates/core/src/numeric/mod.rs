//! Dense `f64` tensors, define-by-run reverse-mode autodiff, optimizers and
//! a parameter checkpoint container.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod optim;
pub mod tensor;

pub use gradcheck::{finite_diff_check, FdConfig, FdReport};
pub use graph::{Graph, Var};
pub use optim::{Adam, Sgd};
pub use tensor::{ParamId, ParamSet, Tensor};
