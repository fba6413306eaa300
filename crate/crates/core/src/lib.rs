//! Span-aware multi-perspective attention for aspect-based sentiment
//! classification.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: dense `f64` tensors with tape-based reverse-mode autodiff.
//! * [`encoder`]: vocabulary, `[CLS] sentence [SEP] aspect [SEP]` layout,
//!   a small trainable encoder and a precomputed-embedding loader.
//! * [`span`]: relative distances, moving masks and span enhancement.
//! * [`attention`]: class-token query, multi-head attention, sentiment
//!   projection and pooling.
//! * [`model`]: the assembled network, its ablation variants, loss and
//!   checkpoints.
//! * [`data`]: SemEval-2014 and Twitter ingestion, canonical records, stats.
//! * [`train`] and [`metrics`]: Adam, training loop, accuracy / macro-F1,
//!   length buckets and paired bootstrap.

pub mod attention;
pub mod data;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod params;
pub mod span;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use data::{Instance, Polarity, Split, TokenSpan};
pub use error::{Error, ErrorKind, Result};
pub use model::{Model, ModelConfig, Variant};
pub use tensor::{Graph, Tensor, Var};
pub use train::TrainConfig;
