//! Cross-modal text-to-image person retrieval.
//!
//! The model aligns a visual stream (a convolutional encoder pooled globally
//! and over K horizontal part bands) with a textual stream (a bidirectional
//! recurrent encoder whose words are softly assigned to parts by a word
//! attention module), plus a multi-view non-local relation branch over the
//! part features. Training optimizes a compound ranking loss with an
//! adaptive margin together with identity classification on every stream;
//! retrieval fuses the global, part, and relation cosine similarities.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod global_branch;
pub mod losses;
pub mod model;
pub mod pfl;
pub mod prl;
pub mod train;

pub use config::{LossConfig, ModelConfig, RunConfig, TrainConfig};
pub use error::{Error, Result};
pub use eval::{evaluate, fuse_scores, rank_k, EvalReport};
pub use model::{FeatureBundle, Model, SimilarityTriple};
pub use train::{train, TrainOutcome};
