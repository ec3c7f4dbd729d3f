// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod binding;
pub mod datagen;
pub mod diffcore;
pub mod error;
pub mod gestaltvae;
pub mod inference;
pub mod momentum;
pub mod perspective;
pub mod popcode;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision aliases for the common case.
pub type Tensor = diffcore::Tensor<f64>;
pub type Tape = diffcore::Tape<f64>;
pub type Model = gestaltvae::GestaltModel<f64>;
pub type Sequence = datagen::FeatureSequence<f64>;
pub type Pose = perspective::Pose<f64>;
pub type Binding = binding::BindingState<f64>;
pub type Encoder = popcode::Encoder<f64>;
