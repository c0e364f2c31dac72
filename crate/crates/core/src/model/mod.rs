//! A small BERT-style encoder with an MLM head and an MLP classifier head.
//!
//! Post-LayerNorm blocks, tanh-approximated GELU, learned position and
//! segment embeddings. Gradients are derived by hand in [`forward`] and are
//! checked against finite differences in the tests.

mod checkpoint;
mod config;
mod forward;
mod loss;
mod params;

pub use checkpoint::{
    ensure_compatible, load_checkpoint, load_checkpoint_for, save_checkpoint, FORMAT_VERSION, MAGIC,
};
pub use config::ModelConfig;
pub use forward::{
    backward, batch_loss, forward_classify, forward_encoder, forward_mlm, Gradients, LossSpec, MaskedTokens,
    Mode, Objective,
};
pub use loss::{loss_kl, loss_mlm, softmax_f64, KL_PROB_FLOOR};
pub use params::{tensor_layout, ClassifierHead, EncoderLayer, LayerNorm, MlmHead, ModelParams};

pub mod checkpoint_bytes {
    pub use super::checkpoint::{from_bytes, to_bytes};
}

use serde::{Deserialize, Serialize};

/// Floating-point element type of the model (f32 for training, f64 for
/// gradient checks).
pub trait Scalar:
    num_traits::Float
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
    + std::fmt::Debug
    + Send
    + Sync
    + 'static
{
    fn c(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn c(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn c(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Classifier output for one item; probabilities are computed in f64 from
/// the logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierOutput {
    pub logits: [f64; 3],
    pub probs: [f64; 3],
}
