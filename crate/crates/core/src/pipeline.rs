//! Stage orchestration. Each stage reads the previous stage's artifacts
//! from a run directory and writes its own; the in-memory entry points
//! skip the disk round trip.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use crate::compile::{
    build_vocabulary, compile_splits, read_records, write_records, CompiledRecord, CompiledSplits,
};
use crate::config::RunConfig;
use crate::corpus::{
    load_interactions, load_kg, parse_item_entities, split_leave_one_out, InteractionLog,
    KnowledgeGraph,
};
use crate::eval::{evaluate_split, write_topk, Fingerprint, MetricsReport, UserTopK};
use crate::model::{
    load_checkpoint, save_checkpoint, train, write_curve, Example, Init, LossPoint, ModelState,
};
use crate::prompts::{load_mpp_templates, MppTemplate, Vocabulary};
use crate::synth::{files, SynthCorpus};

/// Artifact names inside a run directory.
pub mod artifacts {
    pub const CONFIG: &str = "config.json";
    pub const INTERACTIONS: &str = "interactions.filtered.tsv";
    pub const VOCAB: &str = "vocab.txt";
    pub const TRAIN: &str = "train.jsonl";
    pub const VALID: &str = "valid.jsonl";
    pub const TEST: &str = "test.jsonl";
    pub const CHECKPOINT: &str = "model.ckpt";
    pub const LOSS: &str = "loss.csv";
    pub const METRICS: &str = "metrics.json";
    pub const TOPK: &str = "topk.jsonl";
}

/// Loaded inputs of a run.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub log: InteractionLog,
    pub kg: KnowledgeGraph,
    pub templates: Vec<MppTemplate>,
}

impl Corpus {
    /// Loads every input named by the config and applies the k-core filter.
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let d = &cfg.data;
        let interactions = d.resolve(&d.interactions, files::INTERACTIONS, "interactions")?;
        let triples = d.resolve(&d.triples, files::TRIPLES, "triples")?;
        let names = d.resolve(&d.names, files::NAMES, "names")?;
        let links = d.resolve(&d.item_entities, files::ITEM_ENTITIES, "item_entities")?;
        let rel = d.resolve(
            &d.relation_templates,
            files::RELATION_TEMPLATES,
            "relation_templates",
        )?;
        let mpp = d.resolve(&d.mpp_templates, files::MPP_TEMPLATES, "mpp_templates")?;
        let log = load_interactions(&interactions, cfg.min_user_count, cfg.min_item_count)?;
        let kg = load_kg(&triples, &names, &rel)?.with_item_entities(parse_item_entities(&links)?);
        let templates = load_mpp_templates(&mpp)?;
        if templates.is_empty() {
            bail!("{}: no MPP templates", mpp.display());
        }
        Ok(Self { log, kg, templates })
    }

    pub fn from_synth(synth: &SynthCorpus) -> Result<Self> {
        Ok(Self {
            log: synth.log.clone(),
            kg: synth.knowledge_graph()?,
            templates: synth.mpp_templates.clone(),
        })
    }

    /// `ingest`: writes the filtered interaction log.
    pub fn write_filtered(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let p = dir.join(artifacts::INTERACTIONS);
        self.log.write_tsv(&p)?;
        Ok(p)
    }

    pub fn template(&self, id: Option<u32>) -> Result<&MppTemplate> {
        match id {
            None => Ok(&self.templates[0]),
            Some(id) => self
                .templates
                .iter()
                .find(|t| t.id == id)
                .with_context(|| format!("template_id {id} not found among the MPP templates")),
        }
    }
}

/// Compiled inputs plus the vocabulary they were compiled against.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub vocab: Vocabulary,
    pub splits: CompiledSplits,
    pub template_id: u32,
}

pub fn prepare(corpus: &Corpus, cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let template = corpus.template(cfg.template_id)?;
    let vocab = build_vocabulary(&corpus.log, &corpus.kg, &corpus.templates);
    let split = split_leave_one_out(&corpus.log, cfg.max_history)?;
    let splits = compile_splits(&split, template, &corpus.kg, &vocab, &cfg.compile)?;
    Ok(Prepared {
        vocab,
        splits,
        template_id: template.id,
    })
}

pub fn fingerprint(cfg: &RunConfig, template_id: u32) -> Fingerprint {
    Fingerprint {
        hops: cfg.compile.hops,
        degree: cfg.compile.degree,
        template_id,
        seed: cfg.seed,
        mask: cfg.mask,
        mask_cross: cfg.model.mask_cross,
        exclude_seen: cfg.beam.exclude_seen,
    }
}

pub fn examples(
    records: &[CompiledRecord],
    vocab: &Vocabulary,
    use_mask: bool,
) -> Result<Vec<Example>> {
    Ok(records
        .iter()
        .map(|r| r.example(vocab, use_mask))
        .collect::<Result<_, _>>()?)
}

/// Fresh model sized to the vocabulary and the input budget.
pub fn init_model(cfg: &RunConfig, vocab: &Vocabulary) -> Result<ModelState<f32>> {
    let (mut model, _) = cfg.seeded();
    model.vocab_size = vocab.len();
    model.max_len = model.max_len.max(cfg.compile.max_input_tokens);
    Ok(ModelState::new(model, Init::Random)?)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub curve: Vec<LossPoint>,
    pub diverged: Option<(usize, usize)>,
}

/// Trains on the compiled training split. With `checkpoint`, the state is
/// saved after every epoch.
pub fn train_stage(
    prepared: &Prepared,
    cfg: &RunConfig,
    checkpoint: Option<PathBuf>,
    mut progress: impl FnMut(&LossPoint),
) -> Result<(ModelState<f32>, TrainSummary)> {
    let state = init_model(cfg, &prepared.vocab)?;
    let data = examples(&prepared.splits.train, &prepared.vocab, cfg.mask)?;
    let (_, mut tcfg) = cfg.seeded();
    tcfg.checkpoint = checkpoint;
    let out = train(state, &data, &tcfg, |p, _| progress(p))?;
    Ok((
        out.state,
        TrainSummary {
            curve: out.curve,
            diverged: out.diverged,
        },
    ))
}

pub fn eval_stage(
    state: &ModelState<f32>,
    prepared: &Prepared,
    records: &[CompiledRecord],
    cfg: &RunConfig,
) -> Result<(MetricsReport, Vec<UserTopK>)> {
    Ok(evaluate_split(
        state,
        records,
        &prepared.vocab,
        &cfg.beam,
        cfg.mask,
        &cfg.ks,
        fingerprint(cfg, prepared.template_id),
    )?)
}

/// Output of a complete in-memory run.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub report: MetricsReport,
    pub lists: Vec<UserTopK>,
    pub train: TrainSummary,
    pub state: ModelState<f32>,
}

/// Compile, train and evaluate on the test split.
pub fn run_all(corpus: &Corpus, cfg: &RunConfig) -> Result<RunResult> {
    let prepared = prepare(corpus, cfg)?;
    let (state, train) = train_stage(&prepared, cfg, None, |_| {})?;
    if let Some((e, b)) = train.diverged {
        bail!("training diverged at epoch {e}, batch {b}");
    }
    let (report, lists) = eval_stage(&state, &prepared, &prepared.splits.test, cfg)?;
    Ok(RunResult {
        report,
        lists,
        train,
        state,
    })
}

fn require(dir: &Path, name: &str, stage: &str) -> Result<PathBuf> {
    let p = dir.join(name);
    if !p.exists() {
        bail!(
            "missing artifact {} (run `kprompt {stage}` for this run directory first)",
            p.display()
        );
    }
    Ok(p)
}

/// `compile`: writes the vocabulary and the three compiled splits.
pub fn compile_to_dir(corpus: &Corpus, cfg: &RunConfig, dir: &Path) -> Result<Prepared> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let prepared = prepare(corpus, cfg)?;
    let mut saved = cfg.clone();
    saved.template_id = Some(prepared.template_id);
    saved.save(&dir.join(artifacts::CONFIG))?;
    prepared.vocab.save(&dir.join(artifacts::VOCAB))?;
    write_records(&prepared.splits.train, &dir.join(artifacts::TRAIN))?;
    write_records(&prepared.splits.valid, &dir.join(artifacts::VALID))?;
    write_records(&prepared.splits.test, &dir.join(artifacts::TEST))?;
    Ok(prepared)
}

/// The template the artifacts were compiled with, as recorded in the run
/// directory's config.
fn compiled_template_id(dir: &Path, cfg: &RunConfig) -> Result<u32> {
    let saved = RunConfig::load(&require(dir, artifacts::CONFIG, "compile")?)?;
    match (saved.template_id, cfg.template_id) {
        (Some(a), Some(b)) if a != b => {
            bail!("run directory was compiled with template_id {a}, not {b}")
        }
        (Some(a), _) => Ok(a),
        (None, _) => bail!(
            "{} does not record template_id",
            dir.join(artifacts::CONFIG).display()
        ),
    }
}

/// Reads the compile stage's artifacts back.
pub fn load_prepared(dir: &Path, cfg: &RunConfig, with_train: bool) -> Result<Prepared> {
    let vocab = Vocabulary::load(&require(dir, artifacts::VOCAB, "compile")?)?;
    let train = if with_train {
        read_records(&require(dir, artifacts::TRAIN, "compile")?)?
    } else {
        Vec::new()
    };
    let valid = read_records(&require(dir, artifacts::VALID, "compile")?)?;
    let test = read_records(&require(dir, artifacts::TEST, "compile")?)?;
    Ok(Prepared {
        vocab,
        splits: CompiledSplits { train, valid, test },
        template_id: compiled_template_id(dir, cfg)?,
    })
}

/// `train`: trains from the compiled artifacts, writing the checkpoint and
/// loss curve.
pub fn train_dir(
    cfg: &RunConfig,
    dir: &Path,
    progress: impl FnMut(&LossPoint),
) -> Result<TrainSummary> {
    let prepared = load_prepared(dir, cfg, true)?;
    let ckpt = dir.join(artifacts::CHECKPOINT);
    let (state, summary) = train_stage(&prepared, cfg, Some(ckpt.clone()), progress)?;
    write_curve(&summary.curve, &dir.join(artifacts::LOSS))?;
    if let Some((e, b)) = summary.diverged {
        bail!(
            "training diverged at epoch {e}, batch {b}; {} holds the last good epoch",
            ckpt.display()
        );
    }
    save_checkpoint(&state, &ckpt)?;
    Ok(summary)
}

/// `eval`: ranks the chosen split and writes `metrics.json` and the top-k
/// lists.
pub fn eval_dir(cfg: &RunConfig, dir: &Path, valid: bool) -> Result<MetricsReport> {
    let prepared = load_prepared(dir, cfg, false)?;
    let state: ModelState<f32> = load_checkpoint(&require(dir, artifacts::CHECKPOINT, "train")?)?;
    let records = if valid {
        &prepared.splits.valid
    } else {
        &prepared.splits.test
    };
    let (report, lists) = eval_stage(&state, &prepared, records, cfg)?;
    write_topk(&lists, &dir.join(artifacts::TOPK))?;
    let text = serde_json::to_string_pretty(&report)? + "\n";
    std::fs::write(dir.join(artifacts::METRICS), text)?;
    Ok(report)
}

/// One ablation cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub hops: usize,
    pub degree: usize,
    pub mask: bool,
}

impl Cell {
    pub fn name(&self) -> String {
        format!(
            "hops{}-degree{}-mask{}",
            self.hops,
            self.degree,
            if self.mask { "on" } else { "off" }
        )
    }
}

fn parse_range(raw: &str) -> Result<Vec<usize>> {
    let num = |s: &str| {
        s.trim()
            .parse::<usize>()
            .with_context(|| format!("`{s}` is not a non-negative integer"))
    };
    if let Some((a, b)) = raw.split_once("..") {
        let (a, b) = (num(a)?, num(b.trim_start_matches('='))?);
        if a > b {
            bail!("empty range `{raw}`");
        }
        // Ranges are inclusive.
        Ok((a..=b).collect())
    } else {
        raw.split(',').map(num).collect()
    }
}

/// Expands `hops=0..3` or `degree=1,3,5` crossed with `--mask on|off|both`.
/// The axis not swept keeps its value from `base`.
pub fn sweep_cells(sweep: &str, mask: &str, base: &RunConfig) -> Result<Vec<Cell>> {
    let (axis, range) = sweep
        .split_once('=')
        .with_context(|| format!("sweep `{sweep}` must look like hops=0..3 or degree=1..5"))?;
    let values = parse_range(range)?;
    let masks = match mask {
        "on" => vec![true],
        "off" => vec![false],
        "both" => vec![true, false],
        _ => bail!("--mask must be on, off or both, not `{mask}`"),
    };
    let mut cells = Vec::new();
    for &v in &values {
        for &m in &masks {
            let (hops, degree) = match axis.trim() {
                "hops" => (v, base.compile.degree),
                "degree" => (base.compile.hops, v),
                other => bail!("cannot sweep `{other}`; expected hops or degree"),
            };
            cells.push(Cell {
                hops,
                degree,
                mask: m,
            });
        }
    }
    Ok(cells)
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub cell: Cell,
    pub result: Result<MetricsReport, String>,
}

/// Runs compile, train and eval for every cell in its own subdirectory of
/// `dir`. A failing cell is recorded, not fatal.
pub fn ablate(
    corpus: &Corpus,
    base: &RunConfig,
    cells: &[Cell],
    dir: &Path,
    mut progress: impl FnMut(&Cell, &LossPoint),
) -> Vec<AblationRow> {
    cells
        .iter()
        .map(|&cell| {
            let mut cfg = base.clone();
            cfg.compile.hops = cell.hops;
            cfg.compile.degree = cell.degree;
            cfg.mask = cell.mask;
            let sub = dir.join(cell.name());
            let result = compile_to_dir(corpus, &cfg, &sub)
                .and_then(|_| train_dir(&cfg, &sub, |p| progress(&cell, p)))
                .and_then(|_| eval_dir(&cfg, &sub, false))
                .map_err(|e| format!("{e:#}"));
            AblationRow { cell, result }
        })
        .collect()
}

/// One header line plus one row per cell; failed cells carry the error
/// and empty metrics.
pub fn ablation_csv(rows: &[AblationRow], ks: &[usize]) -> String {
    let mut cols: Vec<String> = Vec::new();
    for k in ks {
        cols.push(format!("HR@{k}"));
        cols.push(format!("NDCG@{k}"));
    }
    let mut out = format!("hops,degree,mask,users,{},error\n", cols.join(","));
    for r in rows {
        let c = r.cell;
        let lead = format!(
            "{},{},{}",
            c.hops,
            c.degree,
            if c.mask { "on" } else { "off" }
        );
        match &r.result {
            Ok(rep) => {
                let vals: Vec<String> = cols
                    .iter()
                    .map(|k| {
                        rep.metrics
                            .get(k)
                            .map(|v| format!("{v:.6}"))
                            .unwrap_or_default()
                    })
                    .collect();
                out += &format!("{lead},{},{},\n", rep.users, vals.join(","));
            }
            Err(e) => {
                let blanks = ",".repeat(cols.len());
                out += &format!("{lead},{blanks},\"{}\"\n", e.replace('"', "'"));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweeps_expand_to_grids() {
        let base = RunConfig::default();
        let cells = sweep_cells("hops=0..3", "both", &base).unwrap();
        assert_eq!(cells.len(), 8);
        assert!(cells.iter().all(|c| c.degree == base.compile.degree));
        let cells = sweep_cells("degree=1,3,5", "on", &base).unwrap();
        assert_eq!(
            cells.iter().map(|c| c.degree).collect::<Vec<_>>(),
            [1, 3, 5]
        );
        assert!(sweep_cells("width=1..2", "on", &base).is_err());
        assert!(sweep_cells("hops=3..1", "on", &base).is_err());
        assert!(sweep_cells("hops=1", "maybe", &base).is_err());
    }

    #[test]
    fn csv_has_one_row_per_cell() {
        let cell = Cell {
            hops: 1,
            degree: 3,
            mask: true,
        };
        let rep = MetricsReport {
            users: 2,
            metrics: [("HR@5".to_string(), 0.5), ("NDCG@5".to_string(), 0.25)].into(),
            fingerprint: Fingerprint::default(),
        };
        let rows = vec![
            AblationRow {
                cell,
                result: Ok(rep),
            },
            AblationRow {
                cell: Cell { hops: 3, ..cell },
                result: Err("over budget".into()),
            },
        ];
        let csv = ablation_csv(&rows, &[5]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "hops,degree,mask,users,HR@5,NDCG@5,error");
        assert_eq!(lines[1], "1,3,on,2,0.500000,0.250000,");
        assert_eq!(lines[2], "3,3,on,,,,\"over budget\"");
    }
}
