//! Command-line front-end: `gen-corpus`, `train`, `eval`, `compare` and
//! `grad-check`.
//!
//! Every command writes a `provenance.json` (config echo, seed, format
//! versions) last; its presence marks a completed output directory, which
//! is only overwritten with `--force`.

pub mod checkpoint;
pub mod experiment;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::corpus::records::{read_manifest, write_corpus};
use crate::corpus::{Corpus, CorpusManifest, Split, CORPUS_SCHEMA};
use crate::error::{Error, Result};
use crate::metrics::evaluate_model;
use crate::model::gradcheck::{check_component, Component};
use crate::numerics::gradcheck::registered_ops;
use crate::schedule::{RECIPE_SCHEMA, PART, THREE_STAGE_MIXED, TWO_STAGE};
use experiment::{compare_into, foundation_model, train_into, write_scores, ExperimentConfig, EXPERIMENT_SCHEMA};

pub const PROVENANCE_FILE: &str = "provenance.json";
pub const GRAD_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Parser)]
#[command(name = "partlab", version, about = "Stage-wise speech-LM training on a synthetic corpus")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Materialize the synthetic corpus.
    GenCorpus(GenCorpusArgs),
    /// Run one recipe and write per-stage checkpoints and logs.
    Train(TrainArgs),
    /// Score a checkpoint on a split.
    Eval(EvalArgs),
    /// Train and score several recipes under matched compute.
    Compare(CompareArgs),
    /// Finite-difference check of every differentiable op.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overwrite a completed output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    /// Corpus manifest (TOML); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the manifest seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Built-in recipe name or recipe file; overrides the config.
    #[arg(long)]
    pub recipe: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Experiment config naming the corpus.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Comma-separated recipe names or files.
    #[arg(long, value_delimiter = ',', default_values_t = [PART.to_string(), TWO_STAGE.to_string(), THREE_STAGE_MIXED.to_string()])]
    pub recipe: Vec<String>,
    /// Base seed; overrides the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of consecutive seeds to run from the base seed.
    #[arg(long, default_value_t = 1)]
    pub seeds: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

impl Error {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Validation { .. } | Error::Parse { .. } => 2,
            Error::CorruptCheckpoint { .. } => 3,
            Error::OutputExists(_) => 4,
            Error::Divergence { .. } => 5,
            _ => 1,
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
            print!("{e}");
            Error::Task("help shown".into())
        }
        _ => Error::Config(e.to_string()),
    })?;
    run(cli.command)
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenCorpus(a) => cmd_gen_corpus(&a),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a),
        Command::Compare(a) => cmd_compare(&a),
        Command::GradCheck(a) => cmd_grad_check(&a),
    }
}

#[derive(Serialize)]
struct ProvenanceRecord<'a, C: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    seed: u64,
    formats: Formats,
    config: C,
}

#[derive(Serialize)]
struct Formats {
    checkpoint: String,
    corpus: &'static str,
    recipe: &'static str,
    experiment: &'static str,
}

fn write_provenance<C: Serialize>(dir: &Path, command: &str, seed: u64, config: C) -> Result<()> {
    let rec = ProvenanceRecord {
        tool: "partlab",
        version: env!("CARGO_PKG_VERSION"),
        command,
        seed,
        formats: Formats {
            checkpoint: format!("PARTCKPT/{}", checkpoint::VERSION),
            corpus: CORPUS_SCHEMA,
            recipe: RECIPE_SCHEMA,
            experiment: EXPERIMENT_SCHEMA,
        },
        config,
    };
    write_text(
        &dir.join(PROVENANCE_FILE),
        &(serde_json::to_string_pretty(&rec).expect("provenance serializes") + "\n"),
    )
}

/// Refuses to reuse a completed output directory unless forced.
pub fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.join(PROVENANCE_FILE).exists() && !force {
        return Err(Error::OutputExists(dir.to_path_buf()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    // A forced rerun must not look complete until it finishes.
    let _ = fs::remove_file(dir.join(PROVENANCE_FILE));
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let io = |e: csv::Error| Error::io(format!("writing {}", path.display()), std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn cmd_gen_corpus(a: &GenCorpusArgs) -> Result<()> {
    let mut manifest = match &a.config {
        Some(p) => read_manifest(p)?,
        None => CorpusManifest::default(),
    };
    if let Some(s) = a.seed {
        manifest.seed = s;
    }
    manifest.validate()?;
    let out = &a.common.out;
    prepare_out(out, a.common.force)?;
    let corpus = Corpus::build(&manifest)?;
    write_corpus(&corpus, out)?;
    for split in Split::ALL {
        let asr = corpus.mono.get(split).len();
        let s2tt = corpus.cross.get(split).len();
        println!("{:<5}  asr {asr:>6}  s2tt {s2tt:>6}", split.as_str());
    }
    write_provenance(out, "gen-corpus", manifest.seed, &manifest)
}

fn experiment(config: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut c = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        c.seed = s;
    }
    Ok(c)
}

/// Returns the final dev loss.
pub fn cmd_train(a: &TrainArgs) -> Result<f64> {
    let config = experiment(&a.config, a.seed)?;
    let name = a.recipe.clone().unwrap_or_else(|| config.recipe.clone());
    let recipe = config.recipe_for(&name, config.seed)?;
    let out = &a.common.out;
    prepare_out(out, a.common.force)?;
    let corpus = config.load_corpus()?;
    let foundation = foundation_model(&recipe.model, &recipe.foundation, &corpus)?;
    let (_, report) = train_into(out, &recipe, &corpus, &foundation)?;
    println!(
        "{}: {} steps, final dev loss {:.4}",
        recipe.name,
        recipe.total_steps(),
        report.final_dev_loss
    );
    write_provenance(out, "train", recipe.seed, &recipe)?;
    Ok(report.final_dev_loss)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let config = experiment(&a.config, None)?;
    let split = Split::parse(&a.split)?;
    let (model, prov) = checkpoint::load(&a.checkpoint)?;
    let out = &a.common.out;
    prepare_out(out, a.common.force)?;
    let corpus = config.load_corpus()?;
    model.config.check_vocab(&corpus.vocab)?;
    let report = evaluate_model(&model, &corpus, split)?;
    write_scores(out, &report)?;
    print!("{}", report.to_table());
    write_provenance(out, "eval", prov.seed, serde_json::json!({ "checkpoint": prov, "split": split }))
}

pub fn cmd_compare(a: &CompareArgs) -> Result<()> {
    let config = experiment(&a.config, a.seed)?;
    if a.seeds == 0 {
        return Err(Error::Validation {
            field: "seeds".into(),
            reason: "must be positive".into(),
        });
    }
    if a.recipe.is_empty() {
        return Err(Error::Config("no recipes to compare".into()));
    }
    for r in &a.recipe {
        config.recipe_for(r, config.seed)?;
    }
    let out = &a.common.out;
    prepare_out(out, a.common.force)?;
    let corpus = config.load_corpus()?;
    let seeds: Vec<u64> = (0..a.seeds as u64).map(|i| config.seed + i).collect();
    let foundation = foundation_model(&config.model, &config.foundation, &corpus)?;
    let runs = compare_into(out, &config, &a.recipe, &seeds, &corpus, &foundation)?;
    print!("{}", experiment::comparison_table(&runs));
    write_provenance(
        out,
        "compare",
        config.seed,
        serde_json::json!({ "experiment": config, "recipes": a.recipe, "seeds": seeds }),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckRow {
    pub op: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub pass: bool,
}

/// Every registered op plus the encoder, adapter and full-loss checks.
pub fn grad_check_suite(seed: u64) -> Result<Vec<GradCheckRow>> {
    let row = |op: &str, r: crate::numerics::gradcheck::GradCheckReport| GradCheckRow {
        op: op.to_string(),
        max_rel_error: r.max_rel_error,
        checked: r.checked,
        pass: r.max_rel_error < GRAD_TOLERANCE,
    };
    let mut rows = Vec::new();
    for case in registered_ops() {
        rows.push(row(case.name, case.run(seed)?));
    }
    for c in Component::ALL {
        rows.push(row(c.name(), check_component(c, 6, 4, seed)?));
    }
    Ok(rows)
}

pub fn cmd_grad_check(a: &GradCheckArgs) -> Result<()> {
    if let Some(out) = &a.out {
        prepare_out(out, a.force)?;
    }
    let rows = grad_check_suite(a.seed)?;
    for r in &rows {
        println!(
            "{:<32} {:>10.3e} {:>6} {}",
            r.op,
            r.max_rel_error,
            r.checked,
            if r.pass { "ok" } else { "FAIL" }
        );
    }
    if let Some(out) = &a.out {
        write_csv(&out.join("gradcheck.csv"), &rows)?;
        write_provenance(out, "grad-check", a.seed, serde_json::json!({ "tolerance": GRAD_TOLERANCE }))?;
    }
    let failed: Vec<&str> = rows.iter().filter(|r| !r.pass).map(|r| r.op.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("gradient check failed for {}", failed.join(", "))))
    }
}
