use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers_enc: usize,
    pub layers_dec: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    /// Longest encoder input, in tokens.
    pub max_len: usize,
    /// Decoder length: the item token followed by end-of-sequence.
    pub max_target_len: usize,
    pub dropout: f64,
    pub seed: u64,
    /// Learned absolute position embeddings; off makes the encoder
    /// permutation-equivariant.
    pub positional: bool,
    /// Restrict decoder cross-attention to the tokens visible from the
    /// `[mask]` slot.
    pub mask_cross: bool,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    /// The desk-scale configuration.
    fn default() -> Self {
        Self {
            layers_enc: 2,
            layers_dec: 2,
            d_model: 64,
            heads: 4,
            d_ff: 128,
            vocab_size: 0,
            max_len: 512,
            max_target_len: 2,
            dropout: 0.0,
            seed: 0,
            positional: true,
            mask_cross: false,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Six layers each side, width 512, 8 heads.
    pub fn paper_scale(vocab_size: usize) -> Self {
        Self {
            layers_enc: 6,
            layers_dec: 6,
            d_model: 512,
            heads: 8,
            d_ff: 2048,
            vocab_size,
            dropout: 0.1,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!(
                "d_model ({}) must be a positive multiple of heads ({})",
                self.d_model, self.heads
            ));
        }
        if self.vocab_size < crate::prompts::SPECIALS.len() {
            return bad(format!(
                "vocab_size {} is smaller than the special set",
                self.vocab_size
            ));
        }
        if self.d_ff == 0 || self.max_len == 0 || self.max_target_len == 0 {
            return bad("d_ff, max_len and max_target_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} must be in [0, 1)", self.dropout));
        }
        if self.ln_eps <= 0.0 {
            return bad("ln_eps must be positive".into());
        }
        Ok(())
    }
}
