//! Retrieval-augmented response generation for app-store reviews.
//!
//! The crate covers the full path from raw review/response records to a
//! trained generator and its evaluation:
//!
//! - [`corpus`]: tokenization, vocabulary construction, id encoding with a
//!   per-example extended vocabulary for copyable out-of-vocabulary tokens.
//! - [`retrieval`]: a tf-idf index over training reviews that supplies the
//!   top-k similar reviews' responses as auxiliary decoder inputs.
//! - [`numerics`]: dense tensor kernels plus a reverse-mode differentiation
//!   tape, generic over f32/f64.
//! - [`model`]: bidirectional GRU encoders, an attentive GRU decoder, and a
//!   gated mixture of generation and copy distributions.
//! - [`training`]: Adam with gradient clipping, checkpointing, and
//!   hyperparameter sweeps.
//! - [`generation`]: greedy and beam decoding plus attention export.
//! - [`metrics`]: corpus-level BLEU-4.
//! - [`qafilter`]: a random-Fourier-feature SVM that flags low-quality
//!   generated responses before they are surfaced.
//! - [`pipeline`]: end-to-end orchestration (preprocess, train, evaluate,
//!   ablate) shared by the command-line interface.
//! - [`synth`]: a seeded synthetic corpus generator for exercising the
//!   pipeline without real data.

pub mod corpus;
pub mod error;
pub mod generation;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod qafilter;
pub mod retrieval;
pub mod synth;
pub mod training;

pub use error::Error;

/// Crate-wide result alias for entry points that cross module boundaries.
pub type Result<T> = std::result::Result<T, Error>;
