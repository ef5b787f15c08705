//! Synthetic corpora with planted knowledge-dependent transition rules.
//!
//! Every item links to an entity named `item_<id>` that has exactly one
//! attribute (`has_attr`) and optionally one distractor tag (`has_tag`).
//! Under `shared-attr-next` the next item shares the current item's
//! attribute; under `attr-chain-2hop` it shares the attribute's group
//! (`in_group`), which only appears in prompts from the second hop on.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    CorpusError, EntityId, InteractionLog, ItemId, KnowledgeGraph, RelationId, Triple, UserId,
};
use crate::prompts::{MppTemplate, RelationTemplate};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rule {
    #[serde(rename = "shared-attr-next")]
    SharedAttrNext,
    #[serde(rename = "attr-chain-2hop")]
    AttrChain2Hop,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rule::SharedAttrNext => "shared-attr-next",
            Rule::AttrChain2Hop => "attr-chain-2hop",
        })
    }
}

impl FromStr for Rule {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, SynthError> {
        match s {
            "shared-attr-next" => Ok(Rule::SharedAttrNext),
            "attr-chain-2hop" => Ok(Rule::AttrChain2Hop),
            _ => Err(SynthError::Config(format!(
                "unknown rule `{s}` (expected shared-attr-next or attr-chain-2hop)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_attrs: usize,
    /// Attribute groups; only used by `attr-chain-2hop`.
    pub n_groups: usize,
    /// Distractor tags, one per item; 0 disables them.
    pub n_tags: usize,
    pub rule: Rule,
    /// Probability that a transition ignores the rule.
    pub noise: f64,
    pub seq_len: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_users: 300,
            n_items: 200,
            n_attrs: 20,
            n_groups: 20,
            n_tags: 20,
            rule: Rule::SharedAttrNext,
            noise: 0.2,
            seq_len: 8,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        if !(0.0..=1.0).contains(&self.noise) {
            return bad(format!("noise {} must be in [0, 1]", self.noise));
        }
        if self.n_attrs == 0 || self.n_items < 2 * self.n_attrs {
            return bad(format!(
                "n_items ({}) must be at least 2 x n_attrs ({})",
                self.n_items, self.n_attrs
            ));
        }
        if self.n_users == 0 || self.seq_len < 3 {
            return bad("n_users must be positive and seq_len at least 3".into());
        }
        if self.rule == Rule::AttrChain2Hop && (self.n_groups == 0 || self.n_groups > self.n_attrs)
        {
            return bad(format!(
                "n_groups ({}) must be in 1..=n_attrs ({})",
                self.n_groups, self.n_attrs
            ));
        }
        Ok(())
    }
}

/// A generated corpus in the same shape the loaders produce.
#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub config: SynthConfig,
    pub log: InteractionLog,
    pub triples: Vec<Triple>,
    pub names: BTreeMap<EntityId, String>,
    pub relation_templates: BTreeMap<RelationId, RelationTemplate>,
    pub item_entities: BTreeMap<ItemId, EntityId>,
    pub mpp_templates: Vec<MppTemplate>,
    /// Attribute entity of every item.
    pub item_attr: BTreeMap<ItemId, EntityId>,
    /// Group entity of every attribute (chain rule only).
    pub attr_group: BTreeMap<EntityId, EntityId>,
}

pub fn item_id(i: usize) -> ItemId {
    ItemId::new(format!("{i:04}"))
}

fn user_id(u: usize) -> UserId {
    UserId::new(format!("u{u:04}"))
}

/// Compact template keeping samples short.
pub fn default_mpp_template() -> MppTemplate {
    MppTemplate::new(1, "{user} watched {history} then {mask}").expect("valid template")
}

/// Balanced random assignment of `n` members to `k` classes.
fn assign(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut classes: Vec<usize> = (0..n).map(|i| i % k).collect();
    classes.shuffle(rng);
    classes
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let attr_of = assign(cfg.n_items, cfg.n_attrs, &mut rng);
    let group_of = match cfg.rule {
        Rule::AttrChain2Hop => assign(cfg.n_attrs, cfg.n_groups, &mut rng),
        Rule::SharedAttrNext => Vec::new(),
    };
    let tag_of = if cfg.n_tags > 0 {
        (0..cfg.n_items)
            .map(|_| rng.gen_range(0..cfg.n_tags))
            .collect()
    } else {
        Vec::new()
    };

    // Items in the same rule class as each item, itself excluded.
    let class_of = |i: usize| match cfg.rule {
        Rule::SharedAttrNext => attr_of[i],
        Rule::AttrChain2Hop => group_of[attr_of[i]],
    };
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..cfg.n_items {
        members.entry(class_of(i)).or_default().push(i);
    }

    let mut rows = Vec::with_capacity(cfg.n_users * cfg.seq_len);
    for u in 0..cfg.n_users {
        let mut cur = rng.gen_range(0..cfg.n_items);
        for t in 0..cfg.seq_len {
            rows.push((user_id(u), item_id(cur), t as i64));
            let follow = rng.gen::<f64>() >= cfg.noise;
            let peers: Vec<usize> = members[&class_of(cur)]
                .iter()
                .copied()
                .filter(|&j| j != cur)
                .collect();
            cur = if follow && !peers.is_empty() {
                *peers.choose(&mut rng).expect("non-empty")
            } else {
                rng.gen_range(0..cfg.n_items)
            };
        }
    }
    let log = InteractionLog::from_rows(rows);

    let ent = |s: String| EntityId::new(s);
    let mut triples = Vec::new();
    let mut names = BTreeMap::new();
    let mut item_entities = BTreeMap::new();
    let mut item_attr = BTreeMap::new();
    for i in 0..cfg.n_items {
        let item = item_id(i);
        let e = ent(format!("e{}", item.as_str()));
        names.insert(e.clone(), item.surface());
        item_entities.insert(item.clone(), e.clone());
        let a = ent(format!("attr{:03}", attr_of[i]));
        item_attr.insert(item, a.clone());
        triples.push(Triple {
            head: e.clone(),
            relation: "has_attr".into(),
            tail: a,
        });
        if cfg.n_tags > 0 {
            triples.push(Triple {
                head: e,
                relation: "has_tag".into(),
                tail: ent(format!("tag{:03}", tag_of[i])),
            });
        }
    }
    for a in 0..cfg.n_attrs {
        names.insert(ent(format!("attr{a:03}")), format!("attr_{a}"));
    }
    for t in 0..cfg.n_tags {
        names.insert(ent(format!("tag{t:03}")), format!("tag_{t}"));
    }
    let mut attr_group = BTreeMap::new();
    if cfg.rule == Rule::AttrChain2Hop {
        for (a, &g) in group_of.iter().enumerate() {
            let (ae, ge) = (ent(format!("attr{a:03}")), ent(format!("group{g:03}")));
            triples.push(Triple {
                head: ae.clone(),
                relation: "in_group".into(),
                tail: ge.clone(),
            });
            attr_group.insert(ae, ge.clone());
            names.insert(ge, format!("group_{g}"));
        }
    }

    let mut relation_templates = BTreeMap::new();
    for (r, p) in [
        ("has_attr", "[X] has [Y] ."),
        ("has_tag", "[X] tagged [Y] ."),
        ("in_group", "[X] in [Y] ."),
    ] {
        relation_templates.insert(
            RelationId::from(r),
            RelationTemplate::new(r.into(), p.into()).expect("valid template"),
        );
    }

    Ok(SynthCorpus {
        config: cfg.clone(),
        log,
        triples,
        names,
        relation_templates,
        item_entities,
        mpp_templates: vec![default_mpp_template()],
        item_attr,
        attr_group,
    })
}

/// File names written by [`SynthCorpus::write`] and read by the `ingest`
/// stage.
pub mod files {
    pub const INTERACTIONS: &str = "interactions.tsv";
    pub const TRIPLES: &str = "triples.tsv";
    pub const NAMES: &str = "entity_names.tsv";
    pub const ITEM_ENTITIES: &str = "item_entities.tsv";
    pub const RELATION_TEMPLATES: &str = "relation_templates.json";
    pub const MPP_TEMPLATES: &str = "mpp_templates.json";
}

impl SynthCorpus {
    pub fn knowledge_graph(&self) -> Result<KnowledgeGraph, SynthError> {
        Ok(KnowledgeGraph::new(
            self.triples.iter().cloned(),
            self.names.clone(),
            self.relation_templates.clone(),
        )?
        .with_item_entities(self.item_entities.clone()))
    }

    pub fn write(&self, dir: &Path) -> Result<(), SynthError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| SynthError::Io { path, source }
        };
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        self.log.write_tsv(&dir.join(files::INTERACTIONS))?;
        let write = |name: &str, text: String| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(io(&p))
        };
        let tsv = |rows: Vec<String>| rows.into_iter().map(|r| r + "\n").collect::<String>();
        write(
            files::TRIPLES,
            tsv(self
                .triples
                .iter()
                .map(|t| format!("{}\t{}\t{}", t.head, t.relation, t.tail))
                .collect()),
        )?;
        write(
            files::NAMES,
            tsv(self
                .names
                .iter()
                .map(|(e, n)| format!("{e}\t{n}"))
                .collect()),
        )?;
        write(
            files::ITEM_ENTITIES,
            tsv(self
                .item_entities
                .iter()
                .map(|(i, e)| format!("{i}\t{e}"))
                .collect()),
        )?;
        let rel: BTreeMap<&str, &str> = self
            .relation_templates
            .iter()
            .map(|(r, t)| (r.as_str(), t.pattern.as_str()))
            .collect();
        write(
            files::RELATION_TEMPLATES,
            serde_json::to_string_pretty(&rel).expect("serializable") + "\n",
        )?;
        write(
            files::MPP_TEMPLATES,
            serde_json::to_string_pretty(&self.mpp_templates).expect("serializable") + "\n",
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compile::{build_vocabulary, compile_splits, CompileConfig};
    use crate::corpus::split_leave_one_out;
    use crate::prompts::detokenize;

    fn seq_items(c: &SynthCorpus) -> Vec<Vec<ItemId>> {
        c.log
            .sequences()
            .map(|(_, s)| s.iter().map(|e| e.item.clone()).collect())
            .collect()
    }

    #[test]
    fn noiseless_shared_attr_always_follows_rule() {
        let c = generate(&SynthConfig {
            noise: 0.0,
            n_users: 50,
            ..SynthConfig::default()
        })
        .unwrap();
        for s in seq_items(&c) {
            assert_eq!(s.len(), 8);
            for w in s.windows(2) {
                assert_eq!(c.item_attr[&w[0]], c.item_attr[&w[1]]);
                assert_ne!(w[0], w[1]);
            }
        }
    }

    #[test]
    fn noiseless_chain_shares_group_not_always_attr() {
        let c = generate(&SynthConfig {
            rule: Rule::AttrChain2Hop,
            n_attrs: 100,
            noise: 0.0,
            n_users: 50,
            ..SynthConfig::default()
        })
        .unwrap();
        let mut same_attr = 0;
        let mut pairs = 0;
        for s in seq_items(&c) {
            for w in s.windows(2) {
                let (a, b) = (&c.item_attr[&w[0]], &c.item_attr[&w[1]]);
                assert_eq!(c.attr_group[a], c.attr_group[b]);
                same_attr += usize::from(a == b);
                pairs += 1;
            }
        }
        assert!(same_attr * 3 < pairs, "{same_attr}/{pairs}");
    }

    #[test]
    fn full_noise_is_near_uniform() {
        let c = generate(&SynthConfig {
            noise: 1.0,
            n_users: 2000,
            n_tags: 0,
            ..SynthConfig::default()
        })
        .unwrap();
        let mut shared = 0;
        let mut pairs = 0;
        for s in seq_items(&c) {
            for w in s.windows(2) {
                shared += usize::from(c.item_attr[&w[0]] == c.item_attr[&w[1]]);
                pairs += 1;
            }
        }
        // Chance of a shared attribute is 1 / n_attrs.
        let rate = shared as f64 / pairs as f64;
        assert!((rate - 0.05).abs() < 0.01, "{rate}");
    }

    #[test]
    fn seeded_generation_is_deterministic() {
        let cfg = SynthConfig {
            n_users: 20,
            ..SynthConfig::default()
        };
        let (a, b) = (generate(&cfg).unwrap(), generate(&cfg).unwrap());
        assert_eq!(a.log, b.log);
        assert_eq!(a.triples, b.triples);
        let c = generate(&SynthConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.log, c.log);
    }

    #[test]
    fn two_hop_entity_absent_from_one_hop_prompts() {
        let c = generate(&SynthConfig {
            rule: Rule::AttrChain2Hop,
            n_attrs: 100,
            n_users: 30,
            ..SynthConfig::default()
        })
        .unwrap();
        let kg = c.knowledge_graph().unwrap();
        let vocab = build_vocabulary(&c.log, &kg, &c.mpp_templates);
        let split = split_leave_one_out(&c.log, 5).unwrap();
        for hops in [1, 2] {
            let cfg = CompileConfig {
                hops,
                degree: 4,
                ..CompileConfig::default()
            };
            let comp = compile_splits(&split, &c.mpp_templates[0], &kg, &vocab, &cfg).unwrap();
            let any_group = comp
                .test
                .iter()
                .any(|r| detokenize(&r.tokens, &vocab).contains("group_"));
            assert_eq!(any_group, hops == 2);
        }
    }

    #[test]
    fn written_files_load_back() {
        let c = generate(&SynthConfig {
            n_users: 10,
            ..SynthConfig::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        c.write(dir.path()).unwrap();
        let d = dir.path();
        let log = crate::corpus::load_interactions(&d.join(files::INTERACTIONS), 0, 0).unwrap();
        assert_eq!(log, c.log);
        let kg = crate::corpus::load_kg(
            &d.join(files::TRIPLES),
            &d.join(files::NAMES),
            &d.join(files::RELATION_TEMPLATES),
        )
        .unwrap()
        .with_item_entities(
            crate::corpus::parse_item_entities(&d.join(files::ITEM_ENTITIES)).unwrap(),
        );
        assert_eq!(kg.num_triples(), c.triples.len());
        let t = crate::prompts::load_mpp_templates(&d.join(files::MPP_TEMPLATES)).unwrap();
        assert_eq!(t, c.mpp_templates);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(generate(&SynthConfig {
            noise: 1.5,
            ..SynthConfig::default()
        })
        .is_err());
        assert!(generate(&SynthConfig {
            n_items: 30,
            ..SynthConfig::default()
        })
        .is_err());
        assert!("nope".parse::<Rule>().is_err());
    }
}
