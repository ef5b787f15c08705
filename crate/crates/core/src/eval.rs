//! Full-ranking leave-one-out metrics.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compile::CompiledRecord;
use crate::corpus::{ItemId, UserId};
use crate::generate::{beam_search, BeamConfig, GenerateError};
use crate::model::{encode, ModelState, Scalar};
use crate::prompts::{TokenId, Vocabulary};

/// Cutoffs reported by default.
pub const DEFAULT_KS: [usize; 2] = [5, 10];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("rank must be 1-based, got {0}")]
    BadRank(usize),
    #[error("cutoff k must be positive")]
    ZeroK,
    #[error("nothing to evaluate")]
    Empty,
    #[error("user `{user}`: {source}")]
    User {
        user: UserId,
        #[source]
        source: GenerateError,
    },
    #[error("top-k lists hold {have} items but k = {want} was requested")]
    ShortList { have: usize, want: usize },
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

/// `(HR@k, NDCG@k)` for one user whose target sits at 1-based `rank` of
/// the full ranking (`None` if it is not in the list).
pub fn ndcg_hr(rank: Option<usize>, k: usize) -> Result<(f64, f64), EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    match rank {
        Some(0) => Err(EvalError::BadRank(0)),
        Some(r) if r <= k => Ok((1.0, 1.0 / ((r + 1) as f64).log2())),
        _ => Ok((0.0, 0.0)),
    }
}

/// Identifies the run a report belongs to.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub hops: usize,
    pub degree: usize,
    pub template_id: u32,
    pub seed: u64,
    pub mask: bool,
    pub mask_cross: bool,
    pub exclude_seen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub users: usize,
    /// `HR@k` and `NDCG@k` for every requested k.
    pub metrics: BTreeMap<String, f64>,
    pub fingerprint: Fingerprint,
}

impl MetricsReport {
    pub fn hr(&self, k: usize) -> Option<f64> {
        self.metrics.get(&format!("HR@{k}")).copied()
    }

    pub fn ndcg(&self, k: usize) -> Option<f64> {
        self.metrics.get(&format!("NDCG@{k}")).copied()
    }

    /// `NDCG@k <= HR@k <= HR@k'` for all reported `k <= k'`, all in [0, 1].
    pub fn is_consistent(&self, ks: &[usize]) -> bool {
        let mut ks = ks.to_vec();
        ks.sort_unstable();
        let ok = ks.iter().all(|&k| match (self.hr(k), self.ndcg(k)) {
            (Some(h), Some(n)) => (0.0..=1.0).contains(&h) && (0.0..=h).contains(&n),
            _ => false,
        });
        ok && ks.windows(2).all(|w| self.hr(w[0]) <= self.hr(w[1]))
    }
}

/// One user's ranked list, as persisted in the top-k JSONL.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserTopK {
    pub user: UserId,
    pub target: ItemId,
    pub topk: Vec<(ItemId, f64)>,
}

impl UserTopK {
    pub fn rank(&self) -> Option<usize> {
        self.topk
            .iter()
            .position(|(i, _)| *i == self.target)
            .map(|p| p + 1)
    }
}

/// Averages per-user metrics with equal weight.
pub fn report_from_lists(
    lists: &[UserTopK],
    ks: &[usize],
    fingerprint: Fingerprint,
) -> Result<MetricsReport, EvalError> {
    if lists.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut metrics = BTreeMap::new();
    for &k in ks {
        // A target missing from a list shorter than k is undecidable.
        if let Some(short) = lists
            .iter()
            .find(|l| l.topk.len() < k && l.rank().is_none())
        {
            return Err(EvalError::ShortList {
                have: short.topk.len(),
                want: k,
            });
        }
        let (mut hr, mut ndcg) = (0.0, 0.0);
        for l in lists {
            let (h, n) = ndcg_hr(l.rank(), k)?;
            hr += h;
            ndcg += n;
        }
        let n = lists.len() as f64;
        metrics.insert(format!("HR@{k}"), hr / n);
        metrics.insert(format!("NDCG@{k}"), ndcg / n);
    }
    Ok(MetricsReport {
        users: lists.len(),
        metrics,
        fingerprint,
    })
}

/// Ranks every record's target. Records are processed in parallel; the
/// output order follows the input.
pub fn rank_records<T: Scalar>(
    state: &ModelState<T>,
    records: &[CompiledRecord],
    vocab: &Vocabulary,
    beam: &BeamConfig,
    use_mask: bool,
) -> Result<Vec<UserTopK>, EvalError> {
    let items: Vec<(ItemId, TokenId)> = vocab.item_tokens();
    records
        .par_iter()
        .map(|r| {
            let err = |source: GenerateError| EvalError::User {
                user: r.user.clone(),
                source,
            };
            let mask = use_mask.then(|| r.mask.clone());
            let enc = encode(state, &r.tokens, &mask).map_err(|e| err(e.into()))?;
            let topk = beam_search(state, &enc, &items, &r.history, beam).map_err(err)?;
            Ok(UserTopK {
                user: r.user.clone(),
                target: r.target.clone(),
                topk,
            })
        })
        .collect()
}

pub fn evaluate_split<T: Scalar>(
    state: &ModelState<T>,
    records: &[CompiledRecord],
    vocab: &Vocabulary,
    beam: &BeamConfig,
    use_mask: bool,
    ks: &[usize],
    fingerprint: Fingerprint,
) -> Result<(MetricsReport, Vec<UserTopK>), EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let lists = rank_records(state, records, vocab, beam, use_mask)?;
    let report = report_from_lists(&lists, ks, fingerprint)?;
    Ok((report, lists))
}

pub fn write_topk(lists: &[UserTopK], path: &Path) -> Result<(), EvalError> {
    let io = |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for l in lists {
        serde_json::to_writer(&mut w, l).map_err(|e| io(e.into()))?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_topk(path: &Path) -> Result<Vec<UserTopK>, EvalError> {
    let io = |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = Vec::new();
    for (n, line) in BufReader::new(File::open(path).map_err(io)?)
        .lines()
        .enumerate()
    {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| EvalError::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn list(user: &str, target: &str, ranked: &[&str]) -> UserTopK {
        UserTopK {
            user: user.into(),
            target: target.into(),
            topk: ranked
                .iter()
                .enumerate()
                .map(|(i, s)| (ItemId::from(*s), -(i as f64)))
                .collect(),
        }
    }

    #[test]
    fn hand_table() {
        assert_eq!(ndcg_hr(Some(1), 5).unwrap(), (1.0, 1.0));
        assert_eq!(ndcg_hr(Some(3), 5).unwrap(), (1.0, 0.5));
        assert_eq!(ndcg_hr(Some(7), 5).unwrap(), (0.0, 0.0));
        assert_eq!(ndcg_hr(None, 5).unwrap(), (0.0, 0.0));
        assert!(matches!(ndcg_hr(Some(0), 5), Err(EvalError::BadRank(0))));
        assert!(ndcg_hr(Some(1), 0).is_err());
    }

    #[test]
    fn averages_with_equal_user_weight() {
        let ten = ["a", "b", "c", "d", "e", "f", "g", "h", "i", "j"];
        let lists = vec![list("u1", "a", &ten), list("u2", "z", &ten)];
        let r = report_from_lists(&lists, &DEFAULT_KS, Fingerprint::default()).unwrap();
        assert_eq!(r.hr(5), Some(0.5));
        assert_eq!(r.ndcg(5), Some(0.5));
        assert!(r.is_consistent(&DEFAULT_KS));
        let all = vec![list("u1", "a", &ten), list("u2", "a", &ten)];
        let r = report_from_lists(&all, &DEFAULT_KS, Fingerprint::default()).unwrap();
        assert!(r.metrics.values().all(|&v| v == 1.0));
    }

    #[test]
    fn topk_jsonl_reproduces_report() {
        let ten = ["a", "b", "c", "d", "e", "f", "g", "h", "i", "j"];
        let lists = vec![
            list("u1", "c", &ten),
            list("u2", "h", &ten),
            list("u3", "q", &ten),
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("topk.jsonl");
        write_topk(&lists, &p).unwrap();
        let back = read_topk(&p).unwrap();
        assert_eq!(back, lists);
        let a = report_from_lists(&lists, &DEFAULT_KS, Fingerprint::default()).unwrap();
        let b = report_from_lists(&back, &DEFAULT_KS, Fingerprint::default()).unwrap();
        assert_eq!(a, b);
        let line = std::fs::read_to_string(&p).unwrap();
        assert!(
            line.starts_with(r#"{"user":"u1","target":"c","topk":[["a",-0.0],"#),
            "{line}"
        );
    }

    #[test]
    fn short_lists_are_rejected() {
        let lists = vec![list("u1", "z", &["a", "b"])];
        assert!(matches!(
            report_from_lists(&lists, &[5], Fingerprint::default()),
            Err(EvalError::ShortList { have: 2, want: 5 })
        ));
    }

    proptest! {
        #[test]
        fn metric_ordering_holds(ranks in proptest::collection::vec(proptest::option::of(1usize..15), 1..40)) {
            let names: Vec<String> = (0..15).map(|i| format!("i{i:02}")).collect();
            let lists: Vec<UserTopK> = ranks
                .iter()
                .enumerate()
                .map(|(u, r)| {
                    let target = match r {
                        Some(r) => names[r - 1].clone(),
                        None => "absent".into(),
                    };
                    UserTopK {
                        user: UserId::new(format!("u{u}")),
                        target: ItemId::new(target),
                        topk: names.iter().enumerate().map(|(i, n)| (ItemId::new(n.clone()), -(i as f64))).collect(),
                    }
                })
                .collect();
            let ks = [1, 3, 5, 10];
            let r = report_from_lists(&lists, &ks, Fingerprint::default()).unwrap();
            prop_assert!(r.is_consistent(&ks));
        }
    }
}
