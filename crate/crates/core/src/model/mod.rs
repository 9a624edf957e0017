//! Decoder-only transformer classifier read at the final real token.

mod checkpoint;
mod forward;
mod params;
#[cfg(test)]
mod tests;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, MAGIC, VERSION};
pub use forward::{
    argmax, build, encode_records, forward, forward_with_hidden, hidden_at_final, infer_records,
    load_params, prompt_ids, softmax_row, Outputs, Packed, INFER_CHUNK, LN_EPS,
};
pub use params::{
    count_flops, count_params, init_params, init_student_from_teacher, retained_layers,
    tensor_layout, FlopCount, ParameterSet, INIT_STD,
};

use crate::autodiff::TensorError;
use crate::tokenizer::{TokenizerError, VOCAB_SIZE};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("{0}")]
    Contract(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub n_classes: usize,
    /// Applied only in training mode.
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            hidden_dim: 64,
            n_heads: 4,
            vocab_size: VOCAB_SIZE,
            max_seq: 160,
            n_classes: 2,
            dropout: 0.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.n_layers < 1 {
            return bad("n_layers must be >= 1");
        }
        if self.hidden_dim < 1 || self.n_heads < 1 || self.hidden_dim % self.n_heads != 0 {
            return bad("hidden_dim must be a positive multiple of n_heads");
        }
        if self.n_classes < 2 {
            return bad("n_classes must be >= 2");
        }
        if self.max_seq < 1 {
            return bad("max_seq must be >= 1");
        }
        if self.vocab_size < 1 {
            return bad("vocab_size must be >= 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }
}
