//! Small bidirectional encoders as pairwise reward models.
//!
//! A preference pair is rendered as a cloze question whose masked slot is
//! filled by the verbalizer `1` or `2`; the encoder is trained to put mass on
//! the option holding the preferred response. Adapters (weight-decomposed
//! low-rank) and lower-layer freezing restrict what is trained.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod peft;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{Checkpoint, ModelConfig};
pub use tensor::Tensor;
