//! Reverse-mode automatic differentiation, dense layers and Adam.

mod adam;
mod snapshot;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use snapshot::{Snapshot, TensorEntry, MAGIC as SNAPSHOT_MAGIC};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::{rotation_matrix, sigmoid};
