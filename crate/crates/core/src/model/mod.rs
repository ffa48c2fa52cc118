//! Encoder/decoder model: three bidirectional GRU encoders (review,
//! description, retrieved responses), an attentive GRU decoder, and a gated
//! mixture of a generation distribution with copy distributions over the
//! description and retrieved responses.

pub mod forward;
pub mod params;

pub use forward::{
    attend, decode_step, desc_copy_dist, encode_sources, final_dist, forward_loss, fuse_dists,
    fusion_attention, init_decoder_state, mix_final, retrieved_copy_dist, vocab_dist,
    ForwardResult, SourceEncodings, SourceToggles, StepOutputs, LOG_FLOOR,
};
pub use params::{AttentionHead, BiGruLayer, Bridge, Encoder, ModelDims, ModelParams};

/// Errors raised while building or running the model.
#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
    #[error("review must contain at least one token")]
    EmptyReview,
    #[error("response must contain at least one token to train on")]
    EmptyTarget,
    #[error("model dimension {0} must be positive")]
    ZeroDim(&'static str),
    #[error("pretrained embedding width {got} does not match configured {expected}")]
    EmbeddingDim { expected: usize, got: usize },
    #[error("pretrained embedding file {path}: {message}")]
    EmbeddingFormat { path: String, message: String },
    #[error("target id {id} exceeds distribution width {width}")]
    TargetOutOfRange { id: usize, width: usize },
}

impl ModelError {
    /// True when the failure is a NaN/Inf blow-up rather than a usage error.
    pub fn is_numerical(&self) -> bool {
        matches!(self, ModelError::Numerics(e) if e.is_numerical())
    }
}
