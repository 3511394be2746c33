//! Dense tensors, a tape-based reverse-mode differentiator, an Adam/SGD
//! optimizer, a central-difference gradient checker, and the checkpoint
//! file format shared by every model in the workspace.

pub mod checkpoint;
mod element;
mod error;
pub mod fault;
pub mod gradcheck;
pub mod suite;
mod kernels;
mod optim;
mod params;
mod tape;
mod tensor;

pub use element::{DType, Element};
pub use error::{Result, TensorError};
pub use kernels::{Conv2dSpec, Pool2dSpec, PoolMode};
pub use optim::{Optimizer, UpdateRule};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{sigmoid, softplus, Gradients, OpKind, ReduceMode, Tape, Unary, Var};
pub use tensor::Tensor;
