pub mod augment;
pub mod contrastive;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod numerics;
pub mod pipeline;
pub mod seeding;
pub mod synth;
pub mod tu;

pub use error::{Error, Result};
pub use graph::LabeledGraph;
