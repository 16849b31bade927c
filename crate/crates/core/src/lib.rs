//! ERRA: explainable recommendation with review retrieval and aspect learning.
//!
//! The crate is organized around the stages of the pipeline:
//!
//! - [`data`]: review ingestion, filtering, splitting, sentence segmentation
//!   and the token vocabulary (plus a synthetic dataset generator).
//! - [`encoder`]: the pluggable sentence-encoder contract with a deterministic
//!   stub and a precomputed-embedding adapter.
//! - [`retrieval`]: the sentence corpus index (exact and clustered
//!   approximate search) and query fusion.
//! - [`aspects`]: (feature, opinion) pair extraction and per-interaction
//!   aspect selection.
//! - [`model`]: the joint-enhancement transformer with its custom attention
//!   mask, four loss heads and hand-written backward pass.
//! - [`training`]: Xavier init, Adam, the decay-on-improvement learning-rate
//!   schedule, early stopping and checkpointing.
//! - [`generation`]: greedy decoding and pad/truncate.
//! - [`evaluation`]: RMSE/MAE, BLEU, ROUGE and the optional embedding
//!   similarity score.
//! - [`config`] and [`pipeline`]: the flat-key config file and the
//!   prepare/index/train/explain/eval commands used by the CLI.

pub mod aspects;
pub mod config;
pub mod data;
pub mod encoder;
pub mod evaluation;
pub mod generation;
pub mod model;
pub mod pipeline;
pub mod retrieval;
pub mod training;
