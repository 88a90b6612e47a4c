//! Minimal differentiable core: 4-d tensors, a recording graph with the ops
//! the detector needs, losses, and momentum SGD. Everything runs in f64.

mod graph;
pub mod loss;
mod optim;
mod param;
mod tensor;

pub use graph::{CellTarget, Graph, Live, Reduction, Var};
pub use optim::{clip_grad_norm, NonFiniteGrad, Sgd};
pub use param::{ParamIdx, ParamSet, ParamTensor};
pub use tensor::{ShapeError, Tensor4};
