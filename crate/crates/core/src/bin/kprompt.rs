//! Command-line front end: `synth`, `ingest`, `compile`, `train`, `eval`
//! and `ablate`, each reading and writing a run directory.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use kprompt::config::RunConfig;
use kprompt::pipeline::{self, artifacts, Corpus};
use kprompt::synth::{self, Rule, SynthConfig};

#[derive(Parser)]
#[command(
    name = "kprompt",
    version,
    about = "Knowledge-prompted sequential recommendation"
)]
struct Cli {
    /// Cap on worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus in the loader's file formats.
    Synth(SynthArgs),
    /// Load and filter the inputs; writes the filtered interaction log.
    Ingest(StageArgs),
    /// Compile prompts, knowledge trees and masks for every split.
    Compile(StageArgs),
    /// Train from a compiled run directory.
    Train(StageArgs),
    /// Rank the test (or validation) split of a trained run directory.
    Eval(EvalArgs),
    /// Sweep hops x mask or degree, one subdirectory and CSV row per cell.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "shared-attr-next")]
    rule: Rule,
    #[arg(long)]
    n_users: Option<usize>,
    #[arg(long)]
    n_items: Option<usize>,
    #[arg(long)]
    n_attrs: Option<usize>,
    #[arg(long)]
    n_groups: Option<usize>,
    #[arg(long)]
    n_tags: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct StageArgs {
    /// Run directory holding every artifact.
    #[arg(long)]
    run: PathBuf,
    /// JSON config; for later stages the run directory's config is the base.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `--key value` overrides, dotted paths or short aliases.
    #[arg(
        trailing_var_arg = true,
        allow_hyphen_values = true,
        value_name = "--KEY VALUE"
    )]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Evaluate the validation split instead of the test split.
    #[arg(long)]
    valid: bool,
    #[command(flatten)]
    stage: StageArgs,
}

#[derive(Args)]
struct AblateArgs {
    /// `hops=0..3` or `degree=1..5` (inclusive), or a comma list.
    #[arg(long)]
    sweep: String,
    /// Knowledge-tree mask: on, off or both.
    #[arg(long, default_value = "on")]
    mask: String,
    #[command(flatten)]
    stage: StageArgs,
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = raw.iter();
    while let Some(flag) = it.next() {
        let Some(key) = flag.strip_prefix("--") else {
            bail!("expected `--key value`, found `{flag}`");
        };
        if let Some((k, v)) = key.split_once('=') {
            out.push((k.to_owned(), v.to_owned()));
            continue;
        }
        let value = it
            .next()
            .with_context(|| format!("`--{key}` needs a value"))?;
        out.push((key.to_owned(), value.clone()));
    }
    Ok(out)
}

/// Base config (explicit file, else the run directory's, else defaults),
/// then overrides, then the environment.
fn resolve_config(args: &StageArgs, from_run: bool) -> Result<RunConfig> {
    let saved = args.run.join(artifacts::CONFIG);
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None if from_run && saved.exists() => RunConfig::load(&saved)?,
        None => RunConfig::default(),
    };
    for (k, v) in parse_overrides(&args.overrides)? {
        cfg.set(&k, &v)?;
    }
    cfg.apply_env()?;
    cfg.validate()?;
    Ok(cfg)
}

/// Later stages may change training and ranking knobs but not what was
/// compiled.
fn check_compatible(run: &Path, cfg: &RunConfig) -> Result<()> {
    let saved = RunConfig::load(&run.join(artifacts::CONFIG)).with_context(|| {
        format!(
            "missing artifact {} (run `kprompt compile` for this run directory first)",
            run.join(artifacts::CONFIG).display()
        )
    })?;
    if saved.compile != cfg.compile
        || saved.max_history != cfg.max_history
        || saved.data != cfg.data
        || (cfg.template_id.is_some() && saved.template_id != cfg.template_id)
    {
        bail!(
            "compile-time settings differ from {}; re-run `kprompt compile`",
            run.display()
        );
    }
    Ok(())
}

fn print_progress(p: &kprompt::model::LossPoint) {
    eprintln!(
        "epoch {:>3}  step {:>6}  loss {:.6}  lr {:.2e}",
        p.epoch, p.step, p.loss, p.lr
    );
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Synth(a) => {
            let d = SynthConfig::default();
            let cfg = SynthConfig {
                n_users: a.n_users.unwrap_or(d.n_users),
                n_items: a.n_items.unwrap_or(d.n_items),
                n_attrs: a.n_attrs.unwrap_or(d.n_attrs),
                n_groups: a.n_groups.unwrap_or(d.n_groups),
                n_tags: a.n_tags.unwrap_or(d.n_tags),
                rule: a.rule,
                noise: a.noise.unwrap_or(d.noise),
                seq_len: a.seq_len.unwrap_or(d.seq_len),
                seed: a.seed,
            };
            let corpus = synth::generate(&cfg)?;
            corpus.write(&a.out)?;
            eprintln!(
                "wrote {} users, {} interactions, {} triples to {}",
                corpus.log.num_users(),
                corpus.log.num_interactions(),
                corpus.triples.len(),
                a.out.display()
            );
        }
        Command::Ingest(a) => {
            let cfg = resolve_config(&a, false)?;
            let corpus = Corpus::load(&cfg)?;
            let p = corpus.write_filtered(&a.run)?;
            cfg.save(&a.run.join(artifacts::CONFIG))?;
            println!(
                "{}",
                serde_json::json!({
                    "users": corpus.log.num_users(),
                    "items": corpus.log.items().len(),
                    "interactions": corpus.log.num_interactions(),
                    "triples": corpus.kg.num_triples(),
                    "output": p,
                })
            );
        }
        Command::Compile(a) => {
            let cfg = resolve_config(&a, true)?;
            let corpus = Corpus::load(&cfg)?;
            let prepared = pipeline::compile_to_dir(&corpus, &cfg, &a.run)?;
            println!(
                "{}",
                serde_json::json!({
                    "vocab": prepared.vocab.len(),
                    "train": prepared.splits.train.len(),
                    "valid": prepared.splits.valid.len(),
                    "test": prepared.splits.test.len(),
                    "max_len": prepared.splits.max_len(),
                })
            );
        }
        Command::Train(a) => {
            let cfg = resolve_config(&a, true)?;
            check_compatible(&a.run, &cfg)?;
            cfg.save(&a.run.join(artifacts::CONFIG))?;
            let summary = pipeline::train_dir(&cfg, &a.run, print_progress)?;
            if let Some(last) = summary.curve.last() {
                println!(
                    "{}",
                    serde_json::json!({ "epochs": last.epoch, "loss": last.loss })
                );
            }
        }
        Command::Eval(a) => {
            let cfg = resolve_config(&a.stage, true)?;
            check_compatible(&a.stage.run, &cfg)?;
            let report = pipeline::eval_dir(&cfg, &a.stage.run, a.valid)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Ablate(a) => {
            let cfg = resolve_config(&a.stage, false)?;
            let cells = pipeline::sweep_cells(&a.sweep, &a.mask, &cfg)?;
            let corpus = Corpus::load(&cfg)?;
            std::fs::create_dir_all(&a.stage.run)?;
            cfg.save(&a.stage.run.join(artifacts::CONFIG))?;
            let rows = pipeline::ablate(&corpus, &cfg, &cells, &a.stage.run, |c, p| {
                eprint!("{}  ", c.name());
                print_progress(p);
            });
            let csv = pipeline::ablation_csv(&rows, &cfg.ks);
            let path = a.stage.run.join("ablation.csv");
            std::fs::write(&path, &csv).with_context(|| format!("writing {}", path.display()))?;
            print!("{csv}");
            let failed = rows.iter().filter(|r| r.result.is_err()).count();
            if failed > 0 {
                bail!(
                    "{failed} of {} cells failed; see {}",
                    rows.len(),
                    path.display()
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
