//! Dialogue breakdown detection at desk scale.
//!
//! The crate covers the whole training recipe: a WordPiece [`tokenizer`],
//! DBDC and Reddit ingestion in [`data`], a small BERT-style encoder with
//! hand-written gradients in [`model`], continued masked-LM pre-training in
//! [`pretrain`], SSMBA augmentation in [`ssmba`], KL fine-tuning in
//! [`finetune`] and the DBDC metric suite in [`eval`]. [`pipeline`] chains
//! the stages into one reproducible run.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod pretrain;
pub mod rng;
pub mod ssmba;
pub mod synth;
pub mod tokenizer;

pub use data::{Dialogue, Example, Label, LabelDistribution, Origin, RedditPair};
pub use error::{Error, Result};
pub use eval::MetricReport;

pub use model::{ClassifierOutput, ModelConfig, ModelParams};
pub use tokenizer::{EncodedPair, Vocab};
