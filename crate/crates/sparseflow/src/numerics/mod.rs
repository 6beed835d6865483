//! Dense tensors, reverse-mode differentiation and the optimizer.

mod adam;
mod tape;
mod value;

pub use adam::AdamState;
pub use tape::{Gradients, Tape, Tensor};
pub use value::Value;
