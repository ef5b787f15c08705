//! Turns a split into model-ready records: fused token ids, the knowledge
//! tree that produced them and its visibility mask.
//!
//! Records are the contract between the data half and the model half and
//! are persisted as JSONL, one record per line.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{HeldOut, InteractionLog, ItemId, KnowledgeGraph, SplitSet, UserId};
use crate::ktree::{build_tree, KnowledgeTree, TreeError};
use crate::maskgen::{build_mask, MaskError, MaskMatrix};
use crate::model::Example;
use crate::prompts::{
    render_mpp, render_triple, tokenize, MppTemplate, TokenId, Vocabulary, DEFAULT_MAX_INPUT_TOKENS,
};

#[derive(Debug, Error)]
pub enum CompileError {
    #[error("user `{user}` ({split}): {source}")]
    Sample {
        user: UserId,
        split: Split,
        #[source]
        source: TreeError,
    },
    #[error("user `{user}` ({split}): {source}")]
    Mask {
        user: UserId,
        split: Split,
        #[source]
        source: MaskError,
    },
    #[error("item `{0}` has no token in the vocabulary")]
    UnknownItem(ItemId),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompileConfig {
    pub hops: usize,
    pub degree: usize,
    pub max_input_tokens: usize,
}

impl Default for CompileConfig {
    fn default() -> Self {
        Self {
            hops: 1,
            degree: 3,
            max_input_tokens: DEFAULT_MAX_INPUT_TOKENS,
        }
    }
}

/// One compiled prediction point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompiledRecord {
    pub user: UserId,
    pub split: Split,
    pub history: Vec<ItemId>,
    pub target: ItemId,
    pub tokens: Vec<TokenId>,
    pub mpp: Range<usize>,
    pub kp: Range<usize>,
    pub tree: KnowledgeTree,
    #[serde(with = "mask_b64")]
    pub mask: MaskMatrix,
}

mod mask_b64 {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::maskgen::MaskMatrix;

    pub fn serialize<S: Serializer>(m: &MaskMatrix, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&String::from(m.clone()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<MaskMatrix, D::Error> {
        MaskMatrix::try_from(String::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

impl CompiledRecord {
    /// Model input; `use_mask = false` gives plain bidirectional attention.
    pub fn example(&self, vocab: &Vocabulary, use_mask: bool) -> Result<Example, CompileError> {
        let target = vocab
            .item_token(&self.target)
            .ok_or_else(|| CompileError::UnknownItem(self.target.clone()))?;
        Ok(Example {
            tokens: self.tokens.clone(),
            mask: use_mask.then(|| self.mask.clone()),
            target,
        })
    }
}

/// Vocabulary covering every user, every item, the template words and the
/// verbalization of every triple in the graph.
pub fn build_vocabulary(
    log: &InteractionLog,
    kg: &KnowledgeGraph,
    templates: &[MppTemplate],
) -> Vocabulary {
    let mut texts: Vec<String> = Vec::new();
    for t in templates {
        let mut p = t.pattern.clone();
        for slot in ["{user}", "{history}", "{mask}"] {
            p = p.replace(slot, " ");
        }
        texts.push(p);
        texts.push(t.history_separator.clone());
    }
    texts.extend(log.users().map(UserId::surface));
    texts.extend(log.items().iter().map(ItemId::surface));
    for tr in kg.triples() {
        if let (Some(tmpl), Some(h), Some(t)) = (
            kg.template(&tr.relation),
            kg.name(&tr.head),
            kg.name(&tr.tail),
        ) {
            texts.push(render_triple(tmpl, h, t).text);
        }
    }
    Vocabulary::build(texts.iter().map(String::as_str))
}

/// Compiles one prediction point.
pub fn compile_point(
    user: &UserId,
    split: Split,
    point: &HeldOut,
    template: &MppTemplate,
    kg: &KnowledgeGraph,
    vocab: &Vocabulary,
    cfg: &CompileConfig,
) -> Result<CompiledRecord, CompileError> {
    let sample_err = |source: TreeError| CompileError::Sample {
        user: user.clone(),
        split,
        source,
    };
    let mpp = render_mpp(template, user, &point.history).map_err(|e| sample_err(e.into()))?;
    let toks = tokenize(&mpp.text, vocab);
    let (tree, fused) = build_tree(
        &mpp,
        &toks,
        kg,
        vocab,
        cfg.hops,
        cfg.degree,
        cfg.max_input_tokens,
    )
    .map_err(sample_err)?;
    let mask = build_mask(&tree, fused.len()).map_err(|source| CompileError::Mask {
        user: user.clone(),
        split,
        source,
    })?;
    Ok(CompiledRecord {
        user: user.clone(),
        split,
        history: point.history.clone(),
        target: point.target.clone(),
        tokens: fused.tokens,
        mpp: fused.mpp,
        kp: fused.kp,
        tree,
        mask,
    })
}

/// Compiled splits, each in deterministic (user, position) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CompiledSplits {
    pub train: Vec<CompiledRecord>,
    pub valid: Vec<CompiledRecord>,
    pub test: Vec<CompiledRecord>,
}

impl CompiledSplits {
    pub fn get(&self, split: Split) -> &[CompiledRecord] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn max_len(&self) -> usize {
        [&self.train, &self.valid, &self.test]
            .iter()
            .flat_map(|s| s.iter().map(|r| r.tokens.len()))
            .max()
            .unwrap_or(0)
    }
}

/// Compiles every split. The first failing sample aborts with an error
/// naming the user and split.
pub fn compile_splits(
    split: &SplitSet,
    template: &MppTemplate,
    kg: &KnowledgeGraph,
    vocab: &Vocabulary,
    cfg: &CompileConfig,
) -> Result<CompiledSplits, CompileError> {
    let run = |points: Vec<(UserId, HeldOut)>, which: Split| {
        points
            .iter()
            .map(|(u, p)| compile_point(u, which, p, template, kg, vocab, cfg))
            .collect::<Result<Vec<_>, _>>()
    };
    let held = |m: &std::collections::BTreeMap<UserId, HeldOut>| {
        m.iter()
            .map(|(u, h)| (u.clone(), h.clone()))
            .collect::<Vec<_>>()
    };
    Ok(CompiledSplits {
        train: run(split.train_points(), Split::Train)?,
        valid: run(held(&split.valid), Split::Valid)?,
        test: run(held(&split.test), Split::Test)?,
    })
}

pub fn write_records(records: &[CompiledRecord], path: &Path) -> Result<(), CompileError> {
    let io = |source| CompileError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| io(e.into()))?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_records(path: &Path) -> Result<Vec<CompiledRecord>, CompileError> {
    let io = |source| CompileError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| CompileError::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message: e.to_string(),
            })?,
        );
    }
    Ok(out)
}
