//! Line-level vulnerability localization from attention shifts.
//!
//! Every line of a program is highlighted in turn through a line-index
//! instruction. The prefill attention of each highlighted prompt is compared
//! against the attention of an unhighlighted base prompt, the difference is
//! reduced to a small per-line matrix, and a bidirectional recurrent
//! classifier turns the sequence of per-line matrices into suspicion scores.
//!
//! The crate is organised along the data flow:
//!
//! - [`corpus`]: dataset loading, token-budget filtering, fold assignment
//! - [`prompting`]: base/highlighted prompt rendering and token-to-line maps
//! - [`backend`]: attention providers (toy transformer, binary dumps, HTTP)
//! - [`reduction`]: attention stream to per-line matrices and feature vectors
//! - [`classifier`]: Bi-LSTM / MLP sequence classifier trained with BCE
//! - [`scoring`]: suspicion reports, baseline repeated-output scorer, ranking
//! - [`evaluation`]: Top-N, precision/recall/F1, LoC buckets
//! - [`pipeline`]: configuration, stage functions and cross-validated runs

pub mod backend;
pub mod classifier;
pub mod corpus;
pub mod evaluation;
pub mod matrix;
pub mod pipeline;
pub mod prompting;
pub mod reduction;
pub mod scoring;
pub mod synthetic;

pub use backend::{AttentionBackend, AttentionStream, BackendDescriptor, Granularity, TokenizationResult};
pub use corpus::CodeSample;
pub use prompting::{HighlightStrategy, PromptLayout};
pub use reduction::{DiffAttnMat, LayerwiseAttnMat, VulnAttnMat};
