//! Dense tensors, a reverse-mode tape and the Adam optimizer.

mod adam;
mod gradcheck;
mod graph;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{check_gradients, finite_difference, GradCheck, REL_ERROR_FLOOR};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
