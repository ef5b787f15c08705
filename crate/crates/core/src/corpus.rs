//! Interaction logs, knowledge graphs, leave-one-out splits and n-hop
//! neighbor queries.
//!
//! Everything here is built once at load time and is immutable afterwards,
//! so the structures can be shared freely between threads.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompts::RelationTemplate;

/// Default leave-one-out history window.
pub const DEFAULT_MAX_HISTORY: usize = 5;
/// Default k-core thresholds used for every dataset.
pub const DEFAULT_MIN_USER_COUNT: usize = 5;
pub const DEFAULT_MIN_ITEM_COUNT: usize = 5;

/// Leave-one-out needs one training item, one validation and one test item.
const MIN_SEQUENCE_LEN: usize = 3;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },
    #[error("no interactions left after filtering (min_user_count={min_user}, min_item_count={min_item})")]
    EmptyCorpus { min_user: usize, min_item: usize },
    #[error("relation `{0}` has no template")]
    MissingTemplate(RelationId),
    #[error("entity `{0}` has no display name")]
    MissingName(EntityId),
    #[error("invalid template for relation `{relation}`: {message}")]
    BadTemplate {
        relation: RelationId,
        message: String,
    },
    #[error(
        "user `{user}` has {len} interactions; leave-one-out needs at least {MIN_SEQUENCE_LEN}"
    )]
    SequenceTooShort { user: UserId, len: usize },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }
    };
}

string_id!(
    /// User identifier; rendered as the atomic token `user_<id>`.
    UserId
);
string_id!(
    /// Item identifier; rendered as the atomic token `item_<id>`.
    ItemId
);
string_id!(EntityId);
string_id!(RelationId);

impl UserId {
    pub fn surface(&self) -> String {
        format!("user_{}", self.0)
    }
}

impl ItemId {
    pub fn surface(&self) -> String {
        format!("item_{}", self.0)
    }

    /// Inverse of [`ItemId::surface`].
    pub fn from_surface(token: &str) -> Option<Self> {
        token
            .strip_prefix("item_")
            .filter(|id| is_word_id(id))
            .map(ItemId::from)
    }
}

/// User and item ids become part of single word tokens, so they may only
/// contain characters the tokenizer treats as word characters.
fn is_word_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_alphanumeric() || c == '_')
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub item: ItemId,
    pub timestamp: i64,
}

/// Per-user, time-ordered interaction sequences.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct InteractionLog {
    sequences: BTreeMap<UserId, Vec<Event>>,
}

impl InteractionLog {
    /// Builds a log from raw rows, sorting each user's events by timestamp
    /// (stable, so ties keep row order). No filtering is applied.
    pub fn from_rows(rows: impl IntoIterator<Item = (UserId, ItemId, i64)>) -> Self {
        let mut sequences: BTreeMap<UserId, Vec<Event>> = BTreeMap::new();
        for (user, item, timestamp) in rows {
            sequences
                .entry(user)
                .or_default()
                .push(Event { item, timestamp });
        }
        for seq in sequences.values_mut() {
            seq.sort_by_key(|e| e.timestamp);
        }
        Self { sequences }
    }

    pub fn users(&self) -> impl Iterator<Item = &UserId> {
        self.sequences.keys()
    }

    pub fn sequence(&self, user: &UserId) -> Option<&[Event]> {
        self.sequences.get(user).map(Vec::as_slice)
    }

    pub fn sequences(&self) -> impl Iterator<Item = (&UserId, &[Event])> {
        self.sequences.iter().map(|(u, s)| (u, s.as_slice()))
    }

    pub fn items_of(&self, user: &UserId) -> Vec<ItemId> {
        self.sequence(user)
            .map(|s| s.iter().map(|e| e.item.clone()).collect())
            .unwrap_or_default()
    }

    /// The item vocabulary: every item occurring in some sequence.
    pub fn items(&self) -> BTreeSet<ItemId> {
        self.sequences
            .values()
            .flatten()
            .map(|e| e.item.clone())
            .collect()
    }

    pub fn num_users(&self) -> usize {
        self.sequences.len()
    }

    pub fn num_interactions(&self) -> usize {
        self.sequences.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Iterative k-core filter: drops users with fewer than `min_user`
    /// interactions and items with fewer than `min_item` interactions
    /// (global counts) until nothing changes. Users are additionally
    /// required to keep at least three interactions.
    pub fn filtered(mut self, min_user: usize, min_item: usize) -> Self {
        let min_user = min_user.max(MIN_SEQUENCE_LEN);
        loop {
            let mut item_counts: HashMap<&ItemId, usize> = HashMap::new();
            for e in self.sequences.values().flatten() {
                *item_counts.entry(&e.item).or_default() += 1;
            }
            let rare: BTreeSet<ItemId> = item_counts
                .into_iter()
                .filter(|&(_, c)| c < min_item)
                .map(|(i, _)| i.clone())
                .collect();
            let mut changed = false;
            for seq in self.sequences.values_mut() {
                let before = seq.len();
                seq.retain(|e| !rare.contains(&e.item));
                changed |= seq.len() != before;
            }
            let before = self.sequences.len();
            self.sequences.retain(|_, seq| seq.len() >= min_user);
            changed |= self.sequences.len() != before;
            if !changed {
                return self;
            }
        }
    }

    pub fn write_tsv(&self, path: &Path) -> Result<(), CorpusError> {
        let mut out = String::new();
        for (user, seq) in &self.sequences {
            for e in seq {
                out.push_str(&format!("{}\t{}\t{}\n", user, e.item, e.timestamp));
            }
        }
        std::fs::write(path, out).map_err(io_err(path))
    }
}

fn tsv_fields<'a>(
    line: &'a str,
    n: usize,
    file: &str,
    lineno: usize,
) -> Result<Vec<&'a str>, CorpusError> {
    let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
    if fields.len() != n || fields.iter().any(|f| f.is_empty()) {
        return Err(CorpusError::Parse {
            file: file.to_owned(),
            line: lineno,
            message: format!(
                "expected {n} non-empty tab-separated fields, got {:?}",
                line
            ),
        });
    }
    Ok(fields)
}

/// Reads `user<TAB>item<TAB>timestamp` rows. Blank lines are skipped.
pub fn parse_interactions(reader: impl Read, file: &str) -> Result<InteractionLog, CorpusError> {
    let mut rows = Vec::new();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| CorpusError::Parse {
            file: file.to_owned(),
            line: lineno,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let f = tsv_fields(&line, 3, file, lineno)?;
        let parse_err = |message: String| CorpusError::Parse {
            file: file.to_owned(),
            line: lineno,
            message,
        };
        for id in &f[..2] {
            if !is_word_id(id) {
                return Err(parse_err(format!(
                    "id `{id}` must contain only letters, digits and underscores"
                )));
            }
        }
        let ts: i64 = f[2]
            .parse()
            .map_err(|_| parse_err(format!("timestamp `{}` is not an integer", f[2])))?;
        rows.push((UserId::from(f[0]), ItemId::from(f[1]), ts));
    }
    Ok(InteractionLog::from_rows(rows))
}

/// Loads and k-core filters an interaction file.
pub fn load_interactions(
    path: &Path,
    min_user_count: usize,
    min_item_count: usize,
) -> Result<InteractionLog, CorpusError> {
    let file = File::open(path).map_err(io_err(path))?;
    let log = parse_interactions(file, &path.display().to_string())?
        .filtered(min_user_count, min_item_count);
    if log.is_empty() {
        return Err(CorpusError::EmptyCorpus {
            min_user: min_user_count,
            min_item: min_item_count,
        });
    }
    Ok(log)
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: &str, relation: &str, tail: &str) -> Self {
        Self {
            head: head.into(),
            relation: relation.into(),
            tail: tail.into(),
        }
    }
}

/// Triple store with display names, relation templates and the item to
/// entity link table.
#[derive(Clone, Debug, Default)]
pub struct KnowledgeGraph {
    triples: BTreeSet<Triple>,
    names: BTreeMap<EntityId, String>,
    templates: BTreeMap<RelationId, RelationTemplate>,
    adjacency: BTreeMap<EntityId, Vec<(RelationId, EntityId)>>,
    item_entities: BTreeMap<ItemId, EntityId>,
}

impl KnowledgeGraph {
    /// Builds the graph, dropping self loops and duplicates. Every relation
    /// needs a template and every entity used by a triple needs a name.
    pub fn new(
        triples: impl IntoIterator<Item = Triple>,
        names: BTreeMap<EntityId, String>,
        templates: BTreeMap<RelationId, RelationTemplate>,
    ) -> Result<Self, CorpusError> {
        let triples: BTreeSet<Triple> = triples.into_iter().filter(|t| t.head != t.tail).collect();
        let mut adjacency: BTreeMap<EntityId, Vec<(RelationId, EntityId)>> = BTreeMap::new();
        for t in &triples {
            if !templates.contains_key(&t.relation) {
                return Err(CorpusError::MissingTemplate(t.relation.clone()));
            }
            for e in [&t.head, &t.tail] {
                if !names.contains_key(e) {
                    return Err(CorpusError::MissingName(e.clone()));
                }
            }
            adjacency
                .entry(t.head.clone())
                .or_default()
                .push((t.relation.clone(), t.tail.clone()));
        }
        // BTreeSet iteration already yields (head, relation, tail) order,
        // but sort explicitly so the invariant does not hinge on that.
        for list in adjacency.values_mut() {
            list.sort();
        }
        Ok(Self {
            triples,
            names,
            templates,
            adjacency,
            item_entities: BTreeMap::new(),
        })
    }

    /// Attaches the item to entity link table.
    pub fn with_item_entities(mut self, links: BTreeMap<ItemId, EntityId>) -> Self {
        self.item_entities = links;
        self
    }

    pub fn triples(&self) -> impl Iterator<Item = &Triple> {
        self.triples.iter()
    }

    pub fn num_triples(&self) -> usize {
        self.triples.len()
    }

    pub fn name(&self, entity: &EntityId) -> Option<&str> {
        self.names.get(entity).map(String::as_str)
    }

    pub fn names(&self) -> &BTreeMap<EntityId, String> {
        &self.names
    }

    pub fn template(&self, relation: &RelationId) -> Option<&RelationTemplate> {
        self.templates.get(relation)
    }

    pub fn templates(&self) -> &BTreeMap<RelationId, RelationTemplate> {
        &self.templates
    }

    pub fn adjacency(&self, entity: &EntityId) -> &[(RelationId, EntityId)] {
        self.adjacency.get(entity).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Entity an item is linked to. Items without a link map to a private
    /// entity that has no triples, which yields an empty knowledge subtree.
    pub fn entity_for_item(&self, item: &ItemId) -> EntityId {
        self.item_entities
            .get(item)
            .cloned()
            .unwrap_or_else(|| EntityId(format!("unlinked:{}", item)))
    }

    pub fn item_entities(&self) -> &BTreeMap<ItemId, EntityId> {
        &self.item_entities
    }
}

/// The first `degree` entries of the entity's sorted adjacency list.
/// Unknown entities have no neighbors.
pub fn neighbors<'a>(
    kg: &'a KnowledgeGraph,
    entity: &EntityId,
    degree: usize,
) -> &'a [(RelationId, EntityId)] {
    let adj = kg.adjacency(entity);
    &adj[..degree.min(adj.len())]
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>, CorpusError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if !line.trim().is_empty() {
            out.push((idx + 1, line));
        }
    }
    Ok(out)
}

pub fn parse_triples(path: &Path) -> Result<Vec<Triple>, CorpusError> {
    let file = path.display().to_string();
    read_lines(path)?
        .iter()
        .map(|(n, line)| {
            let f = tsv_fields(line, 3, &file, *n)?;
            Ok(Triple::new(f[0], f[1], f[2]))
        })
        .collect()
}

pub fn parse_names(path: &Path) -> Result<BTreeMap<EntityId, String>, CorpusError> {
    let file = path.display().to_string();
    read_lines(path)?
        .iter()
        .map(|(n, line)| {
            let f = tsv_fields(line, 2, &file, *n)?;
            Ok((EntityId::from(f[0]), f[1].to_owned()))
        })
        .collect()
}

/// Relation templates: a JSON object mapping relation id to pattern.
pub fn parse_relation_templates(
    path: &Path,
) -> Result<BTreeMap<RelationId, RelationTemplate>, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let raw: BTreeMap<String, String> =
        serde_json::from_str(&text).map_err(|e| CorpusError::Parse {
            file: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })?;
    raw.into_iter()
        .map(|(relation, pattern)| {
            let relation = RelationId(relation);
            let template = RelationTemplate::new(relation.clone(), pattern).map_err(|e| {
                CorpusError::BadTemplate {
                    relation: relation.clone(),
                    message: e.to_string(),
                }
            })?;
            Ok((relation, template))
        })
        .collect()
}

pub fn parse_item_entities(path: &Path) -> Result<BTreeMap<ItemId, EntityId>, CorpusError> {
    let file = path.display().to_string();
    read_lines(path)?
        .iter()
        .map(|(n, line)| {
            let f = tsv_fields(line, 2, &file, *n)?;
            Ok((ItemId::from(f[0]), EntityId::from(f[1])))
        })
        .collect()
}

/// Loads triples, entity names and relation templates.
pub fn load_kg(
    triples_path: &Path,
    names_path: &Path,
    templates_path: &Path,
) -> Result<KnowledgeGraph, CorpusError> {
    let triples = parse_triples(triples_path)?;
    let names = parse_names(names_path)?;
    let templates = parse_relation_templates(templates_path)?;
    KnowledgeGraph::new(triples, names, templates)
}

/// One prediction point: a history window and the item that followed it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeldOut {
    pub history: Vec<ItemId>,
    pub target: ItemId,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitSet {
    pub train: BTreeMap<UserId, Vec<ItemId>>,
    pub valid: BTreeMap<UserId, HeldOut>,
    pub test: BTreeMap<UserId, HeldOut>,
    pub max_history: usize,
}

fn window(items: &[ItemId], len: usize) -> Vec<ItemId> {
    items[items.len() - len.min(items.len())..].to_vec()
}

impl SplitSet {
    /// Next-item training points drawn from each training prefix: every
    /// position after the first, with the preceding `max_history` items.
    pub fn train_points(&self) -> Vec<(UserId, HeldOut)> {
        let mut out = Vec::new();
        for (user, prefix) in &self.train {
            for t in 1..prefix.len() {
                out.push((
                    user.clone(),
                    HeldOut {
                        history: window(&prefix[..t], self.max_history),
                        target: prefix[t].clone(),
                    },
                ));
            }
        }
        out
    }
}

/// Leave-one-out split. The last item is the test target, the one before
/// it the validation target, and the rest is the training prefix. Both
/// held-out histories use the same window length, `min(max_history, L - 2)`.
pub fn split_leave_one_out(
    log: &InteractionLog,
    max_history: usize,
) -> Result<SplitSet, CorpusError> {
    let mut split = SplitSet {
        max_history,
        ..SplitSet::default()
    };
    for (user, seq) in log.sequences() {
        let len = seq.len();
        if len < MIN_SEQUENCE_LEN {
            return Err(CorpusError::SequenceTooShort {
                user: user.clone(),
                len,
            });
        }
        let items: Vec<ItemId> = seq.iter().map(|e| e.item.clone()).collect();
        let hist_len = max_history.min(len - 2);
        split.train.insert(user.clone(), items[..len - 2].to_vec());
        split.valid.insert(
            user.clone(),
            HeldOut {
                history: window(&items[..len - 2], hist_len),
                target: items[len - 2].clone(),
            },
        );
        split.test.insert(
            user.clone(),
            HeldOut {
                history: window(&items[..len - 1], hist_len),
                target: items[len - 1].clone(),
            },
        );
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn items(ids: &[&str]) -> Vec<ItemId> {
        ids.iter().map(|&s| ItemId::from(s)).collect()
    }

    fn log_of(seqs: &[(&str, &[&str])]) -> InteractionLog {
        let mut rows = Vec::new();
        for (user, seq) in seqs {
            for (t, item) in seq.iter().enumerate() {
                rows.push((UserId::from(*user), ItemId::from(*item), t as i64));
            }
        }
        InteractionLog::from_rows(rows)
    }

    fn tmpl(rel: &str, pattern: &str) -> (RelationId, RelationTemplate) {
        (
            rel.into(),
            RelationTemplate::new(rel.into(), pattern.to_owned()).unwrap(),
        )
    }

    #[test]
    fn sorts_by_timestamp() {
        let tsv = "u\tC\t9\nu\tA\t3\nu\tB\t5\n";
        let log = parse_interactions(tsv.as_bytes(), "t").unwrap();
        assert_eq!(log.items_of(&"u".into()), items(&["A", "B", "C"]));
    }

    #[test]
    fn ties_keep_file_order() {
        let tsv = "u\tB\t1\nu\tA\t1\nu\tC\t0\n";
        let log = parse_interactions(tsv.as_bytes(), "t").unwrap();
        assert_eq!(log.items_of(&"u".into()), items(&["C", "B", "A"]));
    }

    #[test]
    fn malformed_row_reports_line() {
        let tsv = "u\tA\t1\nu\tB\n";
        match parse_interactions(tsv.as_bytes(), "f.tsv") {
            Err(CorpusError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let tsv = "u\tA\tnoon\n";
        assert!(matches!(
            parse_interactions(tsv.as_bytes(), "f.tsv"),
            Err(CorpusError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn core_filter_keeps_dense_block() {
        // 3 users x 6 interactions over 6 items, each item seen 3 times.
        let log = log_of(&[
            ("a", &["1", "2", "3", "4", "5", "6"]),
            ("b", &["1", "2", "3", "4", "5", "6"]),
            ("c", &["1", "2", "3", "4", "5", "6"]),
        ]);
        assert_eq!(log.clone().filtered(5, 3), log);
        // With an item threshold of 5 every item is too rare.
        assert!(log.filtered(5, 5).is_empty());
    }

    #[test]
    fn core_filter_is_iterative() {
        // Item x is seen 5 times; removing user e (too short) drops it to 4,
        // which then makes x rare and shortens a..d.
        let log = log_of(&[
            ("a", &["x", "p", "p", "p", "p", "p"]),
            ("b", &["x", "p", "p", "p", "p", "p"]),
            ("c", &["x", "p", "p", "p", "p", "p"]),
            ("d", &["x", "p", "p", "p", "p", "p"]),
            ("e", &["x", "q"]),
        ]);
        let out = log.filtered(5, 5);
        assert_eq!(out.num_users(), 4);
        assert!(!out.items().contains(&"x".into()));
        assert_eq!(out.clone().filtered(5, 5), out);
    }

    #[test]
    fn empty_after_filter_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i.tsv");
        std::fs::write(&p, "u\tA\t1\n").unwrap();
        assert!(matches!(
            load_interactions(&p, 5, 5),
            Err(CorpusError::EmptyCorpus { .. })
        ));
    }

    #[test]
    fn leave_one_out_five() {
        let log = log_of(&[("u", &["v1", "v2", "v3", "v4", "v5"])]);
        let s = split_leave_one_out(&log, 5).unwrap();
        let u = UserId::from("u");
        assert_eq!(s.train[&u], items(&["v1", "v2", "v3"]));
        assert_eq!(s.valid[&u].history, items(&["v1", "v2", "v3"]));
        assert_eq!(s.valid[&u].target, "v4".into());
        assert_eq!(s.test[&u].history, items(&["v2", "v3", "v4"]));
        assert_eq!(s.test[&u].target, "v5".into());
    }

    #[test]
    fn leave_one_out_minimum() {
        let log = log_of(&[("u", &["v1", "v2", "v3"])]);
        let s = split_leave_one_out(&log, 5).unwrap();
        let u = UserId::from("u");
        assert_eq!(s.train[&u], items(&["v1"]));
        assert_eq!(s.valid[&u].target, "v2".into());
        assert_eq!(s.test[&u].target, "v3".into());
        assert_eq!(s.test[&u].history, items(&["v2"]));
    }

    #[test]
    fn leave_one_out_truncates() {
        let seq = ["v1", "v2", "v3", "v4", "v5", "v6", "v7", "v8", "v9"];
        let log = log_of(&[("u", &seq)]);
        let s = split_leave_one_out(&log, 5).unwrap();
        assert_eq!(
            s.test[&"u".into()].history,
            items(&["v4", "v5", "v6", "v7", "v8"])
        );
        let points = s.train_points();
        assert_eq!(points.len(), 6);
        assert_eq!(points[5].1.history, items(&["v2", "v3", "v4", "v5", "v6"]));
        assert_eq!(points[5].1.target, "v7".into());
    }

    #[test]
    fn short_sequence_rejected() {
        let log = log_of(&[("short", &["a", "b"])]);
        match split_leave_one_out(&log, 5) {
            Err(CorpusError::SequenceTooShort { user, len }) => {
                assert_eq!(user, "short".into());
                assert_eq!(len, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    fn cast_away_kg() -> KnowledgeGraph {
        let names = [
            ("CastAway", "Cast Away"),
            ("Adventure", "Adventure"),
            ("TomHanks", "Tom Hanks"),
        ]
        .iter()
        .map(|&(e, n)| (EntityId::from(e), n.to_owned()))
        .collect();
        let templates = [
            tmpl("film.genre", "The genre of [X] is [Y]."),
            tmpl("film.starring", "[X] starring [Y]."),
        ]
        .into_iter()
        .collect();
        KnowledgeGraph::new(
            vec![
                Triple::new("CastAway", "film.starring", "TomHanks"),
                Triple::new("CastAway", "film.genre", "Adventure"),
                Triple::new("CastAway", "film.genre", "Adventure"),
                Triple::new("TomHanks", "film.starring", "TomHanks"),
            ],
            names,
            templates,
        )
        .unwrap()
    }

    #[test]
    fn kg_dedups_and_sorts() {
        let kg = cast_away_kg();
        assert_eq!(kg.num_triples(), 2, "duplicate and self loop dropped");
        assert_eq!(
            kg.adjacency(&"CastAway".into()),
            &[
                ("film.genre".into(), "Adventure".into()),
                ("film.starring".into(), "TomHanks".into())
            ]
        );
        assert_eq!(neighbors(&kg, &"CastAway".into(), 2).len(), 2);
        assert!(neighbors(&kg, &"CastAway".into(), 0).is_empty());
        assert!(neighbors(&kg, &"Nobody".into(), 3).is_empty());
    }

    #[test]
    fn missing_template_names_relation() {
        let names = [("a", "A"), ("b", "B")]
            .iter()
            .map(|&(e, n)| (EntityId::from(e), n.to_owned()))
            .collect();
        let err = KnowledgeGraph::new(
            vec![Triple::new("a", "film.budget", "b")],
            names,
            BTreeMap::new(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("film.budget"), "{err}");
    }

    #[test]
    fn missing_name_is_an_error() {
        let names = [("a", "A")]
            .iter()
            .map(|&(e, n)| (EntityId::from(e), n.to_owned()))
            .collect();
        let err = KnowledgeGraph::new(
            vec![Triple::new("a", "r", "b")],
            names,
            [tmpl("r", "[X] r [Y].")].into_iter().collect(),
        )
        .unwrap_err();
        assert!(matches!(err, CorpusError::MissingName(e) if e.as_str() == "b"));
    }

    #[test]
    fn degree_truncation_takes_smallest_under_sort() {
        // Eight neighbors inserted out of order; sorted by (relation, tail):
        // (a,e2) (a,e5) (b,e1) (b,e3) | (b,e9) (c,e0) (c,e4) (d,e7)
        let rows = [
            ("c", "e4"),
            ("b", "e9"),
            ("a", "e5"),
            ("d", "e7"),
            ("b", "e1"),
            ("c", "e0"),
            ("a", "e2"),
            ("b", "e3"),
        ];
        let mut names: BTreeMap<EntityId, String> = BTreeMap::new();
        names.insert("h".into(), "H".into());
        let mut triples = Vec::new();
        for (r, t) in rows {
            names.insert(t.into(), t.to_uppercase());
            triples.push(Triple::new("h", r, t));
        }
        let templates = ["a", "b", "c", "d"]
            .iter()
            .map(|r| tmpl(r, "[X] to [Y]."))
            .collect();
        let kg = KnowledgeGraph::new(triples, names, templates).unwrap();
        let got: Vec<(&str, &str)> = neighbors(&kg, &"h".into(), 4)
            .iter()
            .map(|(r, t)| (r.as_str(), t.as_str()))
            .collect();
        assert_eq!(
            got,
            vec![("a", "e2"), ("a", "e5"), ("b", "e1"), ("b", "e3")]
        );
    }

    #[test]
    fn unlinked_item_gets_empty_entity() {
        let kg = cast_away_kg()
            .with_item_entities([(ItemId::from("1"), EntityId::from("CastAway"))].into());
        assert_eq!(kg.entity_for_item(&"1".into()).as_str(), "CastAway");
        let lone = kg.entity_for_item(&"2".into());
        assert!(kg.adjacency(&lone).is_empty());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn filtering_is_idempotent(
                rows in proptest::collection::vec((0u8..6, 0u8..8, 0i64..50), 0..120),
                mu in 1usize..6,
                mi in 1usize..6,
            ) {
                let log = InteractionLog::from_rows(rows.into_iter().map(|(u, i, t)| {
                    (UserId(u.to_string()), ItemId(i.to_string()), t)
                }));
                let once = log.filtered(mu, mi);
                prop_assert_eq!(once.clone().filtered(mu, mi), once);
            }

            #[test]
            fn split_partitions_sequence(len in 3usize..15, max_history in 1usize..8) {
                let seq: Vec<String> = (0..len).map(|i| format!("v{i}")).collect();
                let refs: Vec<&str> = seq.iter().map(String::as_str).collect();
                let log = log_of(&[("u", &refs)]);
                let s = split_leave_one_out(&log, max_history).unwrap();
                let u = UserId::from("u");
                let mut all = s.train[&u].clone();
                all.push(s.valid[&u].target.clone());
                all.push(s.test[&u].target.clone());
                prop_assert_eq!(all, items(&refs));
                prop_assert!(s.test[&u].history.len() <= max_history);
                prop_assert_eq!(s.test[&u].history.last(), Some(&s.valid[&u].target));
            }
        }
    }
}
