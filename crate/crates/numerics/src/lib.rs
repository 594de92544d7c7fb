//! Minimal dense linear algebra with a reverse-mode gradient tape.
//!
//! Values are `f64` throughout; checkpoints store `f32`. The op set covers what
//! relational graph convolution, residual quantisation losses and a small
//! decoder-only transformer need, and nothing more.

pub mod checkpoint;
pub mod gradcheck;
pub mod kernels;
mod optim;
mod params;
mod tape;
mod tensor;

use std::path::Path;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
pub use optim::{Adam, AdamConfig, StepOutcome};
pub use params::{Bound, ParamStore};
pub use tape::{Gradients, NeighborLists, Tape, Var, BCE_CLAMP};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Format(String),
}

impl NumericsError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
