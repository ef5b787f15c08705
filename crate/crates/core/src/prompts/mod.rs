//! Prompt rendering: masked personalized prompts, verbalized triples,
//! word-level tokenization and the `[SPE]`-delimited fused input.

mod template;
mod tokenizer;

use std::ops::Range;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use template::{
    load_mpp_templates, render_mpp, render_triple, ItemSpan, MppTemplate, PromptText,
    RelationTemplate, MASK_TOKEN,
};
pub use tokenizer::{
    detokenize, segment, tokenize, TokenId, TokenSeq, Vocabulary, BOS, EOS, MASK, PAD, SPE,
    SPECIALS, UNK,
};

/// Input length cap of the encoder, in tokens.
pub const DEFAULT_MAX_INPUT_TOKENS: usize = 512;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Template(String),
    #[error("vocabulary: {0}")]
    Vocabulary(String),
    #[error("cannot render an MPP for an empty history")]
    EmptyHistory,
    #[error(
        "fused prompt needs {required} tokens ({mpp} MPP + {kp} KP + 3 [SPE]) but the budget is \
         {available}; lower the degree or hop count"
    )]
    OverBudget {
        required: usize,
        available: usize,
        mpp: usize,
        kp: usize,
    },
}

/// `[SPE] mpp [SPE] kp [SPE]` with the ranges each part occupies.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusedPrompt {
    pub tokens: Vec<TokenId>,
    pub mpp: Range<usize>,
    pub kp: Range<usize>,
}

impl FusedPrompt {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Positions of the three separator tokens.
    pub fn separators(&self) -> [usize; 3] {
        [0, self.mpp.end, self.kp.end]
    }

    /// Maps a token range of the MPP sequence into fused positions.
    pub fn mpp_range(&self, r: Range<usize>) -> Range<usize> {
        r.start + self.mpp.start..r.end + self.mpp.start
    }

    pub fn kp_range(&self, r: Range<usize>) -> Range<usize> {
        r.start + self.kp.start..r.end + self.kp.start
    }
}

pub fn fuse_prompt(
    mpp: &TokenSeq,
    kp: &TokenSeq,
    max_input_tokens: usize,
) -> Result<FusedPrompt, PromptError> {
    let required = mpp.len() + kp.len() + 3;
    if required > max_input_tokens {
        return Err(PromptError::OverBudget {
            required,
            available: max_input_tokens,
            mpp: mpp.len(),
            kp: kp.len(),
        });
    }
    let mut tokens = Vec::with_capacity(required);
    tokens.push(SPE);
    tokens.extend_from_slice(&mpp.tokens);
    tokens.push(SPE);
    tokens.extend_from_slice(&kp.tokens);
    tokens.push(SPE);
    Ok(FusedPrompt {
        tokens,
        mpp: 1..1 + mpp.len(),
        kp: 2 + mpp.len()..2 + mpp.len() + kp.len(),
    })
}
