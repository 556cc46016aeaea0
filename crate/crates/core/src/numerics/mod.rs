//! Dense tensors, reverse-mode differentiation, Adam, and checkpoints.

pub mod checkpoint;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use optim::{cosine_lr, AdamState};
pub use params::{Binding, Params};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
