//! Knowledge tree: the MPP as root, one node per history item mention, and
//! multi-hop triple prompts below each item, linearized level by level
//! into the knowledge prompt.

use std::collections::VecDeque;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{neighbors, EntityId, ItemId, KnowledgeGraph, Triple};
use crate::prompts::{
    fuse_prompt, render_triple, tokenize, FusedPrompt, PromptError, PromptText, TokenSeq,
    Vocabulary,
};

/// Deepest multi-hop expansion supported.
pub const MAX_HOPS: usize = 3;

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("hops must be at most {MAX_HOPS}, got {0}")]
    TooManyHops(usize),
    #[error("degree must be at least 1")]
    ZeroDegree,
    #[error("mention of item `{0}` is not aligned to token boundaries")]
    UnalignedMention(ItemId),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

pub type NodeId = usize;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum NodeKind {
    Root,
    ItemEntity {
        item: ItemId,
        entity: EntityId,
    },
    TriplePrompt {
        depth: usize,
        triple: Triple,
        text: String,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KTreeNode {
    pub id: NodeId,
    #[serde(flatten)]
    pub kind: NodeKind,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    /// Token ranges in the fused sequence owned by this node. Only the
    /// root owns more than one range.
    pub spans: Vec<Range<usize>>,
}

impl KTreeNode {
    /// Entity that this node hands down to its children.
    pub fn expanded_entity(&self) -> Option<&EntityId> {
        match &self.kind {
            NodeKind::Root => None,
            NodeKind::ItemEntity { entity, .. } => Some(entity),
            NodeKind::TriplePrompt { triple, .. } => Some(&triple.tail),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeTree {
    pub nodes: Vec<KTreeNode>,
    pub hops: usize,
    pub degree: usize,
}

impl KnowledgeTree {
    pub const ROOT: NodeId = 0;

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> Option<&KTreeNode> {
        self.nodes.get(id)
    }

    pub fn parent(&self, id: NodeId) -> Option<NodeId> {
        self.nodes.get(id).and_then(|n| n.parent)
    }

    pub fn depth(&self, id: NodeId) -> usize {
        let mut d = 0;
        let mut cur = id;
        while let Some(p) = self.parent(cur) {
            d += 1;
            cur = p;
        }
        d
    }

    /// Node owning each token position, `None` where no span covers it.
    /// Overlapping spans resolve to the later node.
    pub fn token_owners(&self, len: usize) -> Vec<Option<NodeId>> {
        let mut owners = vec![None; len];
        for node in &self.nodes {
            for span in &node.spans {
                for slot in owners.iter_mut().take(span.end.min(len)).skip(span.start) {
                    *slot = Some(node.id);
                }
            }
        }
        owners
    }

    /// Triple-prompt nodes in level order.
    pub fn prompts(&self) -> impl Iterator<Item = &KTreeNode> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.kind, NodeKind::TriplePrompt { .. }))
    }
}

/// One entry of an entity's n-hop subgraph, in breadth-first order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubgraphPrompt {
    pub depth: usize,
    /// Index (into the returned list) of the prompt that introduced this
    /// prompt's head entity; `None` for hop-1 prompts.
    pub parent: Option<usize>,
    pub triple: Triple,
    pub text: String,
}

/// Breadth-first enumeration of the verbalized n-hop subgraph around
/// `entity`. Each entity expands to at most `degree` triples, and an
/// entity already on the path from `entity` is emitted but not expanded.
pub fn subgraph_prompts(
    kg: &KnowledgeGraph,
    entity: &EntityId,
    hops: usize,
    degree: usize,
) -> Vec<SubgraphPrompt> {
    let mut out = Vec::new();
    if hops == 0 {
        return out;
    }
    // (head, depth of its triples, parent prompt, path from the root)
    let mut queue: VecDeque<(EntityId, usize, Option<usize>, Vec<EntityId>)> = VecDeque::new();
    queue.push_back((entity.clone(), 1, None, vec![entity.clone()]));
    while let Some((head, depth, parent, path)) = queue.pop_front() {
        for (relation, tail) in neighbors(kg, &head, degree) {
            let template = kg
                .template(relation)
                .expect("graph construction checks templates");
            let text = render_triple(
                template,
                kg.name(&head).expect("graph construction checks names"),
                kg.name(tail).expect("graph construction checks names"),
            )
            .text;
            let idx = out.len();
            out.push(SubgraphPrompt {
                depth,
                parent,
                triple: Triple {
                    head: head.clone(),
                    relation: relation.clone(),
                    tail: tail.clone(),
                },
                text,
            });
            if depth < hops && !path.contains(tail) {
                let mut next_path = path.clone();
                next_path.push(tail.clone());
                queue.push_back((tail.clone(), depth + 1, Some(idx), next_path));
            }
        }
    }
    out
}

/// Builds the knowledge tree for a rendered MPP and fuses the MPP with the
/// level-order knowledge prompt.
///
/// Root owns the separators and every MPP token that is not an item
/// mention; each item node owns its mention; each triple prompt owns its
/// own stretch of the knowledge prompt.
pub fn build_tree(
    mpp: &PromptText,
    mpp_tokens: &TokenSeq,
    kg: &KnowledgeGraph,
    vocab: &Vocabulary,
    hops: usize,
    degree: usize,
    max_input_tokens: usize,
) -> Result<(KnowledgeTree, FusedPrompt), TreeError> {
    if hops > MAX_HOPS {
        return Err(TreeError::TooManyHops(hops));
    }
    if degree == 0 {
        return Err(TreeError::ZeroDegree);
    }

    let mut mention_spans = Vec::with_capacity(mpp.item_spans.len());
    for span in &mpp.item_spans {
        let r = mpp_tokens
            .token_span(span.start, span.end)
            .ok_or_else(|| TreeError::UnalignedMention(span.item.clone()))?;
        mention_spans.push(r);
    }

    let mut nodes = vec![KTreeNode {
        id: KnowledgeTree::ROOT,
        kind: NodeKind::Root,
        parent: None,
        children: Vec::new(),
        spans: Vec::new(),
    }];
    let mut subgraphs = Vec::with_capacity(mpp.item_spans.len());
    for span in &mpp.item_spans {
        let entity = kg.entity_for_item(&span.item);
        let id = nodes.len();
        nodes[KnowledgeTree::ROOT].children.push(id);
        subgraphs.push(subgraph_prompts(kg, &entity, hops, degree));
        nodes.push(KTreeNode {
            id,
            kind: NodeKind::ItemEntity {
                item: span.item.clone(),
                entity,
            },
            parent: Some(KnowledgeTree::ROOT),
            children: Vec::new(),
            spans: Vec::new(),
        });
    }

    // Level order: all hop-1 prompts (item by item), then all hop-2, ...
    let mut kp = TokenSeq::default();
    let mut kp_text = String::new();
    let mut kp_spans: Vec<(NodeId, Range<usize>)> = Vec::new();
    let mut node_of: Vec<Vec<Option<NodeId>>> =
        subgraphs.iter().map(|s| vec![None; s.len()]).collect();
    for depth in 1..=hops {
        for (item_idx, prompts) in subgraphs.iter().enumerate() {
            for (p_idx, p) in prompts.iter().enumerate().filter(|(_, p)| p.depth == depth) {
                let parent = match p.parent {
                    None => item_idx + 1,
                    Some(pp) => node_of[item_idx][pp].expect("parents precede children"),
                };
                let id = nodes.len();
                node_of[item_idx][p_idx] = Some(id);
                nodes[parent].children.push(id);

                if !kp_text.is_empty() {
                    kp_text.push(' ');
                }
                let shift = kp_text.len();
                kp_text.push_str(&p.text);
                let toks = tokenize(&p.text, vocab);
                let start = kp.len();
                kp.extend(&toks, shift);
                kp_spans.push((id, start..kp.len()));

                nodes.push(KTreeNode {
                    id,
                    kind: NodeKind::TriplePrompt {
                        depth,
                        triple: p.triple.clone(),
                        text: p.text.clone(),
                    },
                    parent: Some(parent),
                    children: Vec::new(),
                    spans: Vec::new(),
                });
            }
        }
    }

    let fused = fuse_prompt(mpp_tokens, &kp, max_input_tokens)?;

    for (i, r) in mention_spans.iter().enumerate() {
        nodes[i + 1].spans.push(fused.mpp_range(r.clone()));
    }
    for (id, r) in kp_spans {
        nodes[id].spans.push(fused.kp_range(r));
    }

    // Root: separators plus the MPP tokens between mentions.
    let mut in_mention = vec![false; mpp_tokens.len()];
    for r in &mention_spans {
        for flag in &mut in_mention[r.clone()] {
            *flag = true;
        }
    }
    let mut root_positions: Vec<usize> = fused.separators().to_vec();
    root_positions.extend(
        in_mention
            .iter()
            .enumerate()
            .filter(|(_, &m)| !m)
            .map(|(i, _)| i + fused.mpp.start),
    );
    root_positions.sort_unstable();
    nodes[KnowledgeTree::ROOT].spans = merge_positions(&root_positions);

    Ok((
        KnowledgeTree {
            nodes,
            hops,
            degree,
        },
        fused,
    ))
}

fn merge_positions(sorted: &[usize]) -> Vec<Range<usize>> {
    let mut out: Vec<Range<usize>> = Vec::new();
    for &p in sorted {
        match out.last_mut() {
            Some(r) if r.end == p => r.end = p + 1,
            _ => out.push(p..p + 1),
        }
    }
    out
}
