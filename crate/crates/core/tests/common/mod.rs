//! Fixtures shared by the integration tests. Oracles here are written
//! against the public data structures only.

#![allow(dead_code)]

use std::collections::BTreeMap;

use kprompt::compile::{build_vocabulary, compile_point, CompileConfig, CompiledRecord, Split};
use kprompt::corpus::{EntityId, HeldOut, InteractionLog, ItemId, KnowledgeGraph, Triple, UserId};
use kprompt::ktree::{build_tree, KnowledgeTree, NodeId, NodeKind};
use kprompt::prompts::{
    render_mpp, tokenize, FusedPrompt, MppTemplate, RelationTemplate, Vocabulary,
};

pub fn kg_from(triples: &[(&str, &str, &str)], items: &[(&str, &str)]) -> KnowledgeGraph {
    let mut names = BTreeMap::new();
    let mut templates = BTreeMap::new();
    for (h, r, t) in triples {
        names.insert(EntityId::from(*h), h.to_string());
        names.insert(EntityId::from(*t), t.to_string());
        templates.insert(
            (*r).into(),
            RelationTemplate::new((*r).into(), format!("[X] {r} [Y] .")).unwrap(),
        );
    }
    let links = items
        .iter()
        .map(|(i, e)| (ItemId::from(*i), EntityId::from(*e)))
        .collect();
    KnowledgeGraph::new(
        triples.iter().map(|(h, r, t)| Triple::new(h, r, t)),
        names,
        templates,
    )
    .unwrap()
    .with_item_entities(links)
}

/// Items `a` and `b` link to entities A and B. A has prompts to A1 and A2,
/// A1 to A11 and A12, A2 to A21; B has prompts to B1 and B2.
pub fn fig2_kg() -> KnowledgeGraph {
    kg_from(
        &[
            ("A", "r1", "A1"),
            ("A", "r2", "A2"),
            ("A1", "r1", "A11"),
            ("A1", "r2", "A12"),
            ("A2", "r1", "A21"),
            ("B", "r1", "B1"),
            ("B", "r2", "B2"),
        ],
        &[("a", "A"), ("b", "B")],
    )
}

pub fn template() -> MppTemplate {
    MppTemplate::new(
        1,
        "User {user} has previously watched {history}, and is going to watch {mask} next.",
    )
    .unwrap()
}

/// Builds the tree for `history` with a vocabulary covering every prompt.
pub fn compile_tree(
    kg: &KnowledgeGraph,
    history: &[&str],
    hops: usize,
    degree: usize,
) -> (KnowledgeTree, FusedPrompt) {
    let hist: Vec<ItemId> = history.iter().map(|&s| s.into()).collect();
    let log = InteractionLog::from_rows(
        hist.iter()
            .enumerate()
            .map(|(t, i)| ("u".into(), i.clone(), t as i64)),
    );
    let vocab = build_vocabulary(&log, kg, &[template()]);
    let mpp = render_mpp(&template(), &"u".into(), &hist).unwrap();
    let toks = tokenize(&mpp.text, &vocab);
    build_tree(&mpp, &toks, kg, &vocab, hops, degree, usize::MAX).unwrap()
}

pub fn find(tree: &KnowledgeTree, head: &str, tail: &str) -> NodeId {
    tree.nodes
        .iter()
        .find(|n| match &n.kind {
            NodeKind::TriplePrompt { triple, .. } => {
                triple.head.as_str() == head && triple.tail.as_str() == tail
            }
            _ => false,
        })
        .map(|n| n.id)
        .unwrap_or_else(|| panic!("no prompt {head}->{tail}"))
}

/// Owner of every token, read directly off the node spans. Panics unless
/// each token has exactly one owner.
pub fn owners_from_spans(tree: &KnowledgeTree, len: usize) -> Vec<NodeId> {
    let mut owner = vec![None; len];
    for node in &tree.nodes {
        for span in &node.spans {
            for t in span.clone() {
                assert!(owner[t].is_none(), "token {t} owned twice");
                owner[t] = Some(node.id);
            }
        }
    }
    owner
        .into_iter()
        .enumerate()
        .map(|(t, o)| o.unwrap_or_else(|| panic!("token {t} has no owner")))
        .collect()
}

/// Same node, parent, child or sibling, from parent pointers alone.
pub fn related(tree: &KnowledgeTree, a: NodeId, b: NodeId) -> bool {
    let pa = tree.nodes[a].parent;
    let pb = tree.nodes[b].parent;
    a == b || pa == Some(b) || pb == Some(a) || (pa.is_some() && pa == pb)
}

/// A compiled record over the fig2 graph, with a vocabulary covering it.
pub fn fig2_record(history: &[&str], target: &str, hops: usize) -> (CompiledRecord, Vocabulary) {
    let kg = fig2_kg();
    let rows = history
        .iter()
        .chain(std::iter::once(&target))
        .enumerate()
        .map(|(t, i)| (UserId::from("u"), ItemId::from(*i), t as i64));
    let log = InteractionLog::from_rows(rows);
    let vocab = build_vocabulary(&log, &kg, &[template()]);
    let point = HeldOut {
        history: history.iter().map(|&s| s.into()).collect(),
        target: target.into(),
    };
    let cfg = CompileConfig {
        hops,
        degree: 4,
        ..CompileConfig::default()
    };
    let rec = compile_point(
        &"u".into(),
        Split::Test,
        &point,
        &template(),
        &kg,
        &vocab,
        &cfg,
    )
    .unwrap();
    (rec, vocab)
}
