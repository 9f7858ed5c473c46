//! Minimal differentiable compute layer: a reverse-mode tape, a parameter
//! store, and the transformer pieces the encoder and decoders are built from.

pub mod functional;
pub mod layers;
pub mod params;
pub mod tape;

pub use layers::{
    AdaLn, AttentionPool, Block, Conditioning, CrossAttention, CrossContext, LayerNorm, Linear, Mlp, SelfAttention,
    Transformer, TransformerConfig,
};
pub use params::{Adam, ParamBuilder, ParamId, ParamStore};
pub use tape::{Gradients, Mat, Segments, Span, Tape, Var};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("every position of attention row {0} is masked")]
    AllMasked(usize),
    #[error("empty sequence")]
    EmptySequence,
    #[error("backward called without a recorded forward pass")]
    NoGraph,
    #[error("duplicate parameter name {0}")]
    DuplicateParam(String),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
}
