use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters of the encoder and its heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub dropout_rate: f64,
    pub num_labels: usize,
    /// Share the MLM output projection with the token embedding table.
    pub tie_mlm_head: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: crate::tokenizer::DEFAULT_VOCAB_SIZE,
            max_len: 128,
            hidden_dim: 128,
            num_layers: 4,
            num_heads: 4,
            ffn_dim: 512,
            dropout_rate: 0.1,
            num_labels: 3,
            tie_mlm_head: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    /// Every violated constraint as (key, message). Keys name all the fields
    /// involved in the constraint.
    pub fn violations(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let positive = [
            ("vocab_size", self.vocab_size),
            ("hidden_dim", self.hidden_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
        ];
        for (key, v) in positive {
            if v == 0 {
                out.push((key.to_owned(), "must be positive".to_owned()));
            }
        }
        if self.vocab_size > 0 && self.vocab_size <= crate::tokenizer::NUM_SPECIAL {
            out.push(("vocab_size".into(), "must exceed the 5 special tokens".into()));
        }
        if self.max_len < 8 {
            out.push(("max_len".into(), format!("must be at least 8, got {}", self.max_len)));
        }
        if self.num_heads > 0 && !self.hidden_dim.is_multiple_of(self.num_heads) {
            out.push((
                "hidden_dim,num_heads".into(),
                format!(
                    "hidden_dim ({}) must be divisible by num_heads ({})",
                    self.hidden_dim, self.num_heads
                ),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            out.push(("dropout_rate".into(), format!("must lie in [0, 1), got {}", self.dropout_rate)));
        }
        if self.num_labels != 3 {
            out.push(("num_labels".into(), format!("must be 3, got {}", self.num_labels)));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(
                v.iter()
                    .map(|(k, m)| format!("{k}: {m}"))
                    .collect::<Vec<_>>()
                    .join("; "),
            ))
        }
    }

    /// True when two configs produce identically shaped parameters.
    pub fn same_shapes(&self, other: &ModelConfig) -> bool {
        self.vocab_size == other.vocab_size
            && self.max_len == other.max_len
            && self.hidden_dim == other.hidden_dim
            && self.num_layers == other.num_layers
            && self.num_heads == other.num_heads
            && self.ffn_dim == other.ffn_dim
            && self.num_labels == other.num_labels
            && self.tie_mlm_head == other.tie_mlm_head
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn divisibility_names_both_keys() {
        let cfg = ModelConfig {
            hidden_dim: 6,
            num_heads: 4,
            ..ModelConfig::default()
        };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("hidden_dim") && err.contains("num_heads"), "{err}");
    }

    #[test]
    fn collects_all_violations() {
        let cfg = ModelConfig {
            max_len: 4,
            ffn_dim: 0,
            dropout_rate: 1.0,
            ..ModelConfig::default()
        };
        assert_eq!(cfg.violations().len(), 3);
    }
}
