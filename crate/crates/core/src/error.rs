//! Crate-wide error type aggregating the per-module error enums.

use thiserror::Error;

/// Top-level error for library entry points that cross module boundaries.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error(transparent)]
    Retrieval(#[from] crate::retrieval::RetrievalError),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Train(#[from] crate::training::TrainError),
    #[error(transparent)]
    Generation(#[from] crate::generation::GenerationError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error(transparent)]
    Filter(#[from] crate::qafilter::FilterError),
    #[error(transparent)]
    Pipeline(#[from] crate::pipeline::PipelineError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True when the failure is a numerical blow-up (NaN/Inf in a loss or
    /// gradient) rather than bad input data. Callers use this to pick a
    /// process exit code.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Train(e) => e.is_numerical(),
            Error::Numerics(e) => e.is_numerical(),
            Error::Model(e) => e.is_numerical(),
            Error::Generation(e) => e.is_numerical(),
            Error::Pipeline(e) => e.is_numerical(),
            _ => false,
        }
    }
}
