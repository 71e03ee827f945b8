//! Minimal reverse-mode autodiff over dense `f64` tensors, with the layer set
//! used by the sequence model.

pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod serialize;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_with, GradCheckOptions, GradCheckReport};
pub use graph::{GradFault, Graph, LstmState, OpKind, Var};
pub use optim::{build_optimizer, adam_step, sgd_step, Adam, Optimizer, OptimizerKind, Sgd};
pub use serialize::{load_tensors, save_tensors, NamedTensor};
pub use tensor::Tensor;
