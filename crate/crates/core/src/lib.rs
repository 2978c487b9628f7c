//! Language-specific routed feed-forward layers trained with a gate budget
//! loss and teacher distillation, on a small encoder-decoder transformer
//! over synthetic multilingual transduction tasks.

pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
