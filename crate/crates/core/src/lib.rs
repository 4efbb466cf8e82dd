//! Two-stream generative sequential recommendation.
//!
//! Items are tokenized into fixed-length codes by balanced hierarchical
//! k-means over two frozen embedding spaces (behavior and semantic). A shared
//! transformer encoder reads the user's history; one causal decoder per
//! stream generates the next item's code, with a summary token distilled
//! toward the stream's embedding and an auxiliary transfer module linking the
//! streams. At inference each stream runs trie-constrained beam search and the
//! per-stream candidates are fused by length-normalized likelihood.

pub mod codes;
pub mod corpus;
pub mod embed;
pub mod error;
pub mod eval;
pub mod infer;
pub mod kv;
pub mod linalg;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod selfcheck;
pub mod train;

pub use codes::{build_code_tree, CodeTree, ItemCode};
pub use corpus::{Dataset, Interaction, Split, TrainingExample};
pub use embed::EmbeddingMatrix;
pub use error::{EagerError, Result};
pub use eval::MetricsReport;
pub use infer::{RankedList, StreamView};
pub use model::{EagerModel, LossBreakdown, ModelConfig};
pub use train::{TrainConfig, TrainReport};
