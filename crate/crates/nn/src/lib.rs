//! Dense f64 tensors with reverse-mode automatic differentiation and the
//! small operator set a time-distributed CNN + bidirectional LSTM
//! classifier needs, plus Adam, a training loop with early stopping, and a
//! binary checkpoint format.
//!
//! Values are 64-bit so finite-difference gradient checks can run at tight
//! tolerances; the models this crate targets are desk-scale.

pub mod adam;
pub mod checkpoint;
pub mod graph;
pub mod init;
pub mod model;
pub mod tensor;
pub mod train;

mod conv;

pub use adam::{Adam, AdamConfig};
pub use graph::{Graph, GraphError, NodeId};
pub use model::{BackboneConfig, Model, ModelConfig, SepBlock};
pub use tensor::{ParamSet, Tensor};
pub use train::{Sample, TrainConfig, TrainingHistory};
