use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PromptError;
use crate::corpus::ItemId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub const PAD: TokenId = TokenId(0);
pub const UNK: TokenId = TokenId(1);
pub const SPE: TokenId = TokenId(2);
pub const MASK: TokenId = TokenId(3);
pub const EOS: TokenId = TokenId(4);
/// Decoder start token.
pub const BOS: TokenId = TokenId(5);

/// Reserved ids 0..6, in order.
pub const SPECIALS: [&str; 6] = ["[PAD]", "[UNK]", "[SPE]", "[mask]", "[EOS]", "[BOS]"];

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Word-level segmentation: runs of letters/digits/underscores form words,
/// every other non-space character is its own token, and the bracketed
/// special tokens are kept whole. Returns byte ranges.
pub fn segment(text: &str) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut chars = text.char_indices().peekable();
    'outer: while let Some(&(start, c)) = chars.peek() {
        if c.is_whitespace() {
            chars.next();
            continue;
        }
        if c == '[' {
            for special in SPECIALS {
                if text[start..].starts_with(special) {
                    out.push(start..start + special.len());
                    while chars
                        .peek()
                        .is_some_and(|&(i, _)| i < start + special.len())
                    {
                        chars.next();
                    }
                    continue 'outer;
                }
            }
        }
        if is_word_char(c) {
            let mut end = start;
            while let Some(&(i, ch)) = chars.peek() {
                if !is_word_char(ch) {
                    break;
                }
                end = i + ch.len_utf8();
                chars.next();
            }
            out.push(start..end);
        } else {
            chars.next();
            out.push(start..start + c.len_utf8());
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Specials first, then every distinct word of `texts` in sorted order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words = BTreeSet::new();
        for text in texts {
            for r in segment(text) {
                let w = &text[r];
                if !SPECIALS.contains(&w) {
                    words.insert(w.to_owned());
                }
            }
        }
        Self::from_tokens(
            SPECIALS
                .iter()
                .map(|s| s.to_string())
                .chain(words)
                .collect(),
        )
        .expect("specials are in place")
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self, PromptError> {
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(PromptError::Vocabulary(format!(
                    "id {i} must be the special token {s}"
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), TokenId(i as u32)).is_some() {
                return Err(PromptError::Vocabulary(format!("duplicate token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let text = std::fs::read_to_string(path).map_err(|e| PromptError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_tokens(text.lines().map(str::to_owned).collect())
    }

    pub fn save(&self, path: &Path) -> Result<(), PromptError> {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        std::fs::write(path, out).map_err(|e| PromptError::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> TokenId {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens
            .get(id.index())
            .map(String::as_str)
            .unwrap_or("[UNK]")
    }

    pub fn item_token(&self, item: &ItemId) -> Option<TokenId> {
        self.id(&item.surface())
    }

    pub fn item_of(&self, id: TokenId) -> Option<ItemId> {
        ItemId::from_surface(self.tokens.get(id.index())?)
    }

    /// All `item_*` tokens, sorted by item id.
    pub fn item_tokens(&self) -> Vec<(ItemId, TokenId)> {
        let mut out: Vec<(ItemId, TokenId)> = self
            .tokens
            .iter()
            .enumerate()
            .filter_map(|(i, t)| ItemId::from_surface(t).map(|item| (item, TokenId(i as u32))))
            .collect();
        out.sort();
        out
    }
}

/// Token ids plus the byte range each token came from.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub tokens: Vec<TokenId>,
    pub offsets: Vec<Range<usize>>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Token range exactly covering the byte range `start..end`, if the
    /// range is aligned to token boundaries.
    pub fn token_span(&self, start: usize, end: usize) -> Option<Range<usize>> {
        let first = self.offsets.iter().position(|r| r.start == start)?;
        let last = self.offsets[first..].iter().position(|r| r.end == end)? + first;
        Some(first..last + 1)
    }

    /// Appends `other`, shifting its byte offsets by `text_shift`.
    pub fn extend(&mut self, other: &TokenSeq, text_shift: usize) {
        self.tokens.extend_from_slice(&other.tokens);
        self.offsets.extend(
            other
                .offsets
                .iter()
                .map(|r| r.start + text_shift..r.end + text_shift),
        );
    }
}

pub fn tokenize(text: &str, vocab: &Vocabulary) -> TokenSeq {
    let offsets = segment(text);
    let tokens = offsets
        .iter()
        .map(|r| vocab.id_or_unk(&text[r.clone()]))
        .collect();
    TokenSeq { tokens, offsets }
}

pub fn detokenize(tokens: &[TokenId], vocab: &Vocabulary) -> String {
    tokens
        .iter()
        .map(|&t| vocab.token(t))
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> Vocabulary {
        Vocabulary::build([
            "item_42 item_7 The genre of Cast Away is Adventure.",
            "user_1 [mask]",
        ])
    }

    #[test]
    fn specials_reserved() {
        let v = vocab();
        for (i, s) in SPECIALS.iter().enumerate() {
            assert_eq!(v.id(s), Some(TokenId(i as u32)));
        }
        assert_eq!(v.id("[mask]"), Some(MASK));
    }

    #[test]
    fn item_tokens_are_atomic() {
        let v = vocab();
        let seq = tokenize("item_42 item_7", &v);
        assert_eq!(
            seq.tokens,
            vec![v.id("item_42").unwrap(), v.id("item_7").unwrap()]
        );
        assert_eq!(v.item_of(seq.tokens[0]), Some("42".into()));
    }

    #[test]
    fn punctuation_split() {
        let v = vocab();
        let text = "The genre of Cast Away is Adventure.";
        let seq = tokenize(text, &v);
        let words: Vec<&str> = seq.offsets.iter().map(|r| &text[r.clone()]).collect();
        assert_eq!(
            words,
            ["The", "genre", "of", "Cast", "Away", "is", "Adventure", "."]
        );
        assert!(!seq.tokens.contains(&UNK));
    }

    #[test]
    fn specials_inside_text() {
        let v = vocab();
        let seq = tokenize("watch [mask] next[SPE]", &v);
        assert_eq!(seq.tokens[1], MASK);
        assert_eq!(seq.tokens[3], SPE);
        assert_eq!(seq.tokens[0], UNK);
    }

    #[test]
    fn unknown_word() {
        assert_eq!(tokenize("zebra", &vocab()).tokens, vec![UNK]);
    }

    #[test]
    fn span_lookup() {
        let v = vocab();
        let text = "item_42, item_7";
        let seq = tokenize(text, &v);
        assert_eq!(seq.token_span(9, 15), Some(2..3));
        assert_eq!(seq.token_span(0, 8), Some(0..2));
        assert_eq!(seq.token_span(1, 7), None);
    }

    #[test]
    fn vocab_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        let v = vocab();
        v.save(&p).unwrap();
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
        std::fs::write(&p, "[UNK]\n[PAD]\n").unwrap();
        assert!(Vocabulary::load(&p).is_err());
    }

    proptest! {
        #[test]
        fn detokenize_roundtrips_modulo_whitespace(words in proptest::collection::vec("[a-z_]{1,6}|[.,!?]", 0..20)) {
            let text = words.join(" ");
            let v = Vocabulary::build([text.as_str()]);
            let back = detokenize(&tokenize(&text, &v).tokens, &v);
            let squash = |s: &str| s.split_whitespace().collect::<String>();
            prop_assert_eq!(squash(&back), squash(&text));
        }
    }
}
