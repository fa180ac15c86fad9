//! A capsule-network text classifier: an ensemble of bidirectional GRUs feeds
//! primary capsules, dynamic routing, and a dense softmax head, trained with a
//! small reverse-mode autodiff engine.

pub mod ablation;
pub mod artifact;
pub mod config;
pub mod error;
pub mod gradsuite;
pub mod layers;
pub mod tensor;
pub mod text;
pub mod training;

pub use config::{Activation, ModelConfig, SoftmaxAxis, Variant};
pub use error::{Error, Result};
pub use layers::{Batch, Model};
pub use tensor::{Scalar, Tape, Tensor, Var};
