//! Dense tensors, reverse-mode differentiation and the motion-token
//! encoder-decoder transformer.

mod checkpoint;
pub mod features;
pub mod graph;
mod infer;
mod model;
pub mod tensor;

pub use checkpoint::CHECKPOINT_VERSION;
pub use features::{FeatureConfig, SceneFeatures};
pub use graph::{AttnMask, Gradients, Graph, ParamStore, Var};
pub use infer::DecoderCache;
pub use model::{Encoded, ForecastModel, HlaLogits, ModelConfig};
pub use tensor::Tensor;

use crate::tokenizer::TokenError;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("backward called on a value that was not recorded for differentiation")]
    Detached,
    #[error("usage error: {0}")]
    Usage(String),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Token(#[from] TokenError),
    #[error("sequence has {found} tokens, the horizon is {expected}")]
    SequenceLength { expected: usize, found: usize },
    #[error("checkpoint tensor {name}: expected shape {expected:?}, found {found:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
