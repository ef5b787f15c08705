//! Constrained beam search over the item vocabulary.
//!
//! The first decoding step may only emit item tokens, every later step
//! only end-of-sequence. Log-probabilities are renormalized over the
//! allowed set at each step, so the forced steps contribute `ln 1 = 0` and
//! a beam of width `w >= k` returns the exact top-k items.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::ItemId;
use crate::model::{encode, next_token_logprobs, Encoded, ModelError, ModelState, Scalar};
use crate::prompts::{TokenId, BOS};

#[derive(Debug, Error)]
pub enum GenerateError {
    #[error("beam width {width} must be at least k = {k}, and k at least 1")]
    Config { width: usize, k: usize },
    #[error("no candidate items")]
    NoCandidates,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeamConfig {
    pub beam_width: usize,
    pub k: usize,
    /// Item token plus end-of-sequence.
    pub max_target_len: usize,
    /// Drop the history items from the candidate set.
    pub exclude_seen: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam_width: 20,
            k: 10,
            max_target_len: 2,
            exclude_seen: false,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<(), GenerateError> {
        if self.k == 0 || self.beam_width < self.k || self.max_target_len < 2 {
            return Err(GenerateError::Config {
                width: self.beam_width,
                k: self.k,
            });
        }
        Ok(())
    }
}

/// Descending score, then ascending item id.
pub fn rank_order(a: &(ItemId, f64), b: &(ItemId, f64)) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Top-k items for one encoded input. `items` lists every candidate item
/// with its token; `seen` is only consulted with `exclude_seen`.
pub fn beam_search<T: Scalar>(
    state: &ModelState<T>,
    enc: &Encoded<T>,
    items: &[(ItemId, TokenId)],
    seen: &[ItemId],
    cfg: &BeamConfig,
) -> Result<Vec<(ItemId, f64)>, GenerateError> {
    cfg.validate()?;
    let allowed: Vec<&(ItemId, TokenId)> = items
        .iter()
        .filter(|(item, _)| !(cfg.exclude_seen && seen.contains(item)))
        .collect();
    if allowed.is_empty() {
        return Err(GenerateError::NoCandidates);
    }
    let lp = next_token_logprobs(state, enc, &[BOS])?;
    let raw = allowed.iter().map(|(_, t)| lp[t.index()].f64());
    let norm = log_sum_exp(raw.clone());
    let mut beams: Vec<(ItemId, f64)> = allowed
        .iter()
        .zip(raw)
        .map(|((item, _), s)| (item.clone(), s - norm))
        .collect();
    beams.sort_by(rank_order);
    beams.truncate(cfg.beam_width);
    // Later steps allow only EOS, which every beam emits with renormalized
    // probability one; scores are unchanged and the beams finish.
    beams.truncate(cfg.k);
    Ok(beams)
}

/// Scores every allowed item by full enumeration; the reference that
/// [`beam_search`] must agree with.
pub fn exhaustive_scores<T: Scalar>(
    state: &ModelState<T>,
    tokens: &[TokenId],
    mask: &Option<crate::maskgen::MaskMatrix>,
    items: &[(ItemId, TokenId)],
) -> Result<Vec<(ItemId, f64)>, GenerateError> {
    let enc = encode(state, tokens, mask)?;
    let lp = next_token_logprobs(state, &enc, &[BOS])?;
    let norm = log_sum_exp(items.iter().map(|(_, t)| lp[t.index()].f64()));
    let mut out: Vec<(ItemId, f64)> = items
        .iter()
        .map(|(i, t)| (i.clone(), lp[t.index()].f64() - norm))
        .collect();
    out.sort_by(rank_order);
    Ok(out)
}
