//! Dense tensor algebra with reverse-mode differentiation, pooling,
//! the Adam optimizer, and the checkpoint format.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod tensor;

pub use adam::{adam_step, AdamState};
pub use checkpoint::Checkpoint;
pub use gradcheck::{analytic_grads, evaluate_scalar, grad_check, GradCheckConfig, ScalarFn};
pub use graph::{Graph, PoolKind, TensorId};
pub use params::ParamStore;
pub use tensor::Tensor;
