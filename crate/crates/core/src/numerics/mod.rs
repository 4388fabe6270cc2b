//! Dense tensors, reverse-mode differentiation and the ADAM recurrence.

mod adam;
mod graph;
pub mod io;
mod tensor;

pub(crate) use adam::adam_step_in_place;
pub use adam::{adam_step, AdamConfig, AdamState};
pub use graph::{Bindings, Evaluation, Graph, NodeId};
pub use tensor::{argmax, Tensor};
