//! Decoder-only transformer with an explicit key/value history.

mod checkpoint;
mod history;
mod model;
mod tokenizer;
mod train;

pub use checkpoint::{read_archive, write_archive, Manifest, TensorEntry, MANIFEST_FILE, WEIGHTS_FILE};
pub use history::{History, LayerKv};
pub use model::{LayerParams, LmParams, LmVars, PastVars, StepInput, TransformerLm};
pub use tokenizer::{split_words, TokenId, Tokenizer, TokenizerKind, WordVocab, BOS, EOS, UNK};
pub use train::{read_corpus, train_lm, train_lm_on_text, train_tokens, TrainOptions, TrainReport};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub max_context: usize,
    pub tokenizer_kind: TokenizerKind,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            vocab_size: 256,
            max_context: 256,
            tokenizer_kind: TokenizerKind::Byte,
        }
    }
}

impl LmConfig {
    /// Architecture of the separately trained perplexity evaluator.
    pub fn evaluator() -> Self {
        Self { n_layers: 2, n_heads: 2, d_model: 64, ..Self::default() }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn d_mlp(&self) -> usize {
        4 * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &'static str, reason: &str| Err(Error::InvalidField { field, reason: reason.to_string() });
        if self.n_layers == 0 {
            return bad("n_layers", "must be positive");
        }
        if self.n_heads == 0 {
            return bad("n_heads", "must be positive");
        }
        if self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model", "must be a positive multiple of n_heads");
        }
        if self.vocab_size == 0 {
            return bad("vocab_size", "must be positive");
        }
        if self.max_context < 2 {
            return bad("max_context", "must be at least 2");
        }
        if self.tokenizer_kind == TokenizerKind::Byte && self.vocab_size != 256 {
            return bad("vocab_size", "byte tokenizer requires 256");
        }
        Ok(())
    }
}
