//! Experiment configuration and the training/evaluation drivers behind the
//! CLI commands.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::{self, Provenance};
use super::{write_csv, write_text};
use crate::corpus::records::load_corpus;
use crate::corpus::{Corpus, Split};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_model, ScoreReport};
use crate::model::{ModelConfig, SlmModel};
use crate::numerics::Group;
use crate::schedule::{builtin_recipe, pretrain, run_recipe, Budget, FoundationSpec, RecipeReport, RecipeSpec, BUILTIN_NAMES};

pub const EXPERIMENT_SCHEMA: &str = "partlab-experiment/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: String,
    /// Materialized corpus directory; relative paths resolve against the
    /// config file's directory.
    pub corpus: PathBuf,
    /// Built-in recipe name or path to a recipe file.
    #[serde(default = "default_recipe")]
    pub recipe: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub budget: Budget,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub foundation: FoundationSpec,
}

fn default_recipe() -> String {
    crate::schedule::PART.into()
}

impl ExperimentConfig {
    pub fn new(corpus: impl Into<PathBuf>) -> Self {
        Self {
            schema: EXPERIMENT_SCHEMA.into(),
            corpus: corpus.into(),
            recipe: default_recipe(),
            seed: 0,
            budget: Budget::default(),
            model: ModelConfig::default(),
            foundation: FoundationSpec::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::parse("experiment config", e))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Reads a config file and resolves its corpus path.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut c = Self::from_toml(&text)?;
        if c.corpus.is_relative() {
            if let Some(dir) = path.parent() {
                c.corpus = dir.join(&c.corpus);
            }
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != EXPERIMENT_SCHEMA {
            return Err(Error::Validation {
                field: "schema".into(),
                reason: format!("expected `{EXPERIMENT_SCHEMA}`"),
            });
        }
        if self.budget.batch_size == 0 {
            return Err(Error::Validation {
                field: "budget.batch_size".into(),
                reason: "must be positive".into(),
            });
        }
        self.model.validate()?;
        self.foundation.validate()
    }

    /// Resolves `name` (a built-in name or a recipe file) for `seed`.
    /// Unknown names fail here, before any compute.
    pub fn recipe_for(&self, name: &str, seed: u64) -> Result<RecipeSpec> {
        let path = Path::new(name);
        if BUILTIN_NAMES.contains(&name) {
            let mut r = builtin_recipe(name, self.budget, &self.model, seed)?;
            r.foundation = self.foundation.clone();
            return Ok(r);
        }
        if path.extension().is_some_and(|e| e == "toml") || path.exists() {
            let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading recipe {name}"), e))?;
            let mut r = RecipeSpec::from_toml(&text)?;
            r.seed = seed;
            return Ok(r);
        }
        Err(Error::Config(format!(
            "unknown recipe `{name}` (known: {}; or a path to a recipe file)",
            BUILTIN_NAMES.join(", ")
        )))
    }

    pub fn load_corpus(&self) -> Result<Corpus> {
        load_corpus(&self.corpus)
    }
}

/// Encoder and language model after the warm starts; shared by every run
/// with the same model config and foundation spec.
pub fn foundation_model(config: &ModelConfig, spec: &FoundationSpec, corpus: &Corpus) -> Result<SlmModel> {
    let mut m = SlmModel::new(config.clone(), spec.seed)?;
    pretrain(&mut m, corpus, spec)?;
    Ok(m)
}

/// A fresh model for `seed` carrying the pretrained encoder and language
/// model; the adapter keeps its own random initialization.
pub fn initial_model(foundation: &SlmModel, seed: u64) -> Result<SlmModel> {
    let mut m = SlmModel::new(foundation.config.clone(), seed)?;
    m.copy_groups(foundation, &[Group::Encoder, Group::Llm])?;
    Ok(m)
}

pub fn stage_checkpoint(dir: &Path, stage: usize) -> PathBuf {
    dir.join(format!("stage{}.ckpt", stage + 1))
}

pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Runs `recipe` from `foundation`, writing per-stage checkpoints and the
/// loss, audit and sampler logs into `dir`.
pub fn train_into(dir: &Path, recipe: &RecipeSpec, corpus: &Corpus, foundation: &SlmModel) -> Result<(SlmModel, RecipeReport)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut model = initial_model(foundation, recipe.seed)?;
    let report = run_recipe(recipe, corpus, &mut model, |i, stage, m| {
        let prov = Provenance {
            recipe: recipe.name.clone(),
            stage: stage.stage.clone(),
            seed: recipe.seed,
        };
        checkpoint::save(m, &prov, &stage_checkpoint(dir, i))
    })?;
    let prov = Provenance {
        recipe: recipe.name.clone(),
        stage: "final".into(),
        seed: recipe.seed,
    };
    checkpoint::save(&model, &prov, &dir.join(FINAL_CHECKPOINT))?;
    write_csv(&dir.join("loss.csv"), report.losses())?;
    write_csv(&dir.join("audit.csv"), report.audit())?;
    write_csv(&dir.join("draws.csv"), report.draws())?;
    write_text(
        &dir.join("recipe.toml"),
        &recipe.to_toml(),
    )?;
    write_text(
        &dir.join("summary.json"),
        &serde_json::to_string_pretty(&serde_json::json!({
            "recipe": report.recipe,
            "seed": recipe.seed,
            "total_steps": recipe.total_steps(),
            "final_dev_loss": report.final_dev_loss,
            "frozen_groups_unchanged": report.audit().all(|a| a.frozen_unchanged()),
        }))
        .expect("json"),
    )?;
    Ok((model, report))
}

pub fn write_scores(dir: &Path, report: &ScoreReport) -> Result<()> {
    write_text(&dir.join(format!("scores_{}.csv", report.split)), &report.to_csv())?;
    write_text(&dir.join(format!("scores_{}.txt", report.split)), &report.to_table())
}

/// Metric columns of one evaluated run, keyed `<row>_<metric>`.
pub fn score_columns(report: &ScoreReport) -> Vec<(String, f64)> {
    let mut cols: Vec<(String, f64)> = report
        .rows
        .iter()
        .map(|r| (format!("{}_{}", r.label, r.metric.as_str()), r.value))
        .collect();
    if let Some(v) = report.asr_macro {
        cols.push(("asr_macro".into(), v));
    }
    if let Some(v) = report.bleu_macro {
        cols.push(("bleu_macro".into(), v));
    }
    cols
}

/// One evaluated (recipe, seed) run of a comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct RunScores {
    pub recipe: String,
    pub seed: u64,
    pub final_dev_loss: f64,
    pub initial_loss: f32,
    pub final_loss: f32,
    pub columns: Vec<(String, f64)>,
}

impl RunScores {
    pub fn get(&self, column: &str) -> Option<f64> {
        self.columns.iter().find(|(c, _)| c == column).map(|&(_, v)| v)
    }
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_spread(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-run rows (`runs.csv`).
pub fn runs_csv(runs: &[RunScores]) -> String {
    let cols: Vec<&str> = runs.first().map(|r| r.columns.iter().map(|(c, _)| c.as_str()).collect()).unwrap_or_default();
    let mut s = String::from("recipe,seed,final_dev_loss,initial_loss,final_loss");
    for c in &cols {
        let _ = write!(s, ",{c}");
    }
    s.push('\n');
    for r in runs {
        let _ = write!(s, "{},{},{},{},{}", r.recipe, r.seed, r.final_dev_loss, r.initial_loss, r.final_loss);
        for c in &cols {
            let _ = write!(s, ",{}", r.get(c).map(|v| v.to_string()).unwrap_or_default());
        }
        s.push('\n');
    }
    s
}

/// One row per recipe, in first-seen order. With several seeds every
/// metric gets a `<column>_sd` companion.
pub fn comparison_csv(runs: &[RunScores]) -> String {
    let mut order: Vec<&str> = Vec::new();
    let mut by_recipe: BTreeMap<&str, Vec<&RunScores>> = BTreeMap::new();
    for r in runs {
        if !order.contains(&r.recipe.as_str()) {
            order.push(&r.recipe);
        }
        by_recipe.entry(&r.recipe).or_default().push(r);
    }
    let cols: Vec<&str> = runs.first().map(|r| r.columns.iter().map(|(c, _)| c.as_str()).collect()).unwrap_or_default();
    let multi = by_recipe.values().any(|v| v.len() > 1);
    let mut s = String::from("recipe,seeds");
    for c in &cols {
        let _ = write!(s, ",{c}");
        if multi {
            let _ = write!(s, ",{c}_sd");
        }
    }
    s.push('\n');
    for name in order {
        let rs = &by_recipe[name];
        let _ = write!(s, "{name},{}", rs.len());
        for c in &cols {
            let vals: Vec<f64> = rs.iter().filter_map(|r| r.get(c)).collect();
            let (m, sd) = mean_spread(&vals);
            let _ = write!(s, ",{m}");
            if multi {
                let _ = write!(s, ",{sd}");
            }
        }
        s.push('\n');
    }
    s
}

/// Human-readable comparison: macro columns as `mean ± sd`.
pub fn comparison_table(runs: &[RunScores]) -> String {
    let mut order: Vec<&str> = Vec::new();
    for r in runs {
        if !order.contains(&r.recipe.as_str()) {
            order.push(&r.recipe);
        }
    }
    let cols: Vec<String> = runs.first().map(|r| r.columns.iter().map(|(c, _)| c.clone()).collect()).unwrap_or_default();
    let mut s = format!("{:<20}", "recipe");
    for c in &cols {
        let _ = write!(s, " {c:>16}");
    }
    s.push('\n');
    for name in order {
        let _ = write!(s, "{name:<20}");
        for c in &cols {
            let vals: Vec<f64> = runs.iter().filter(|r| r.recipe == name).filter_map(|r| r.get(c)).collect();
            let (m, sd) = mean_spread(&vals);
            let cell = if c.ends_with("bleu") || c == "bleu_macro" {
                format!("{m:.2}±{sd:.2}")
            } else {
                format!("{m:.4}±{sd:.4}")
            };
            let _ = write!(s, " {cell:>16}");
        }
        s.push('\n');
    }
    s
}

/// Trains and evaluates every (seed, recipe) pair from one shared
/// foundation. Each run gets its own directory under `dir`; `runs.csv` is
/// rewritten after every run so partial results survive a failure.
pub fn compare_into(
    dir: &Path,
    config: &ExperimentConfig,
    recipes: &[String],
    seeds: &[u64],
    corpus: &Corpus,
    foundation: &SlmModel,
) -> Result<Vec<RunScores>> {
    let specs: Vec<Vec<RecipeSpec>> = seeds
        .iter()
        .map(|&s| recipes.iter().map(|r| config.recipe_for(r, s)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    let steps: Vec<usize> = specs.iter().flatten().map(RecipeSpec::total_steps).collect();
    if steps.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::Config("compared recipes must have equal total step budgets".into()));
    }
    let mut runs = Vec::new();
    for (seed, row) in seeds.iter().zip(specs) {
        for spec in row {
            let run_dir = dir.join(&spec.name).join(format!("seed{seed}"));
            let result = train_into(&run_dir, &spec, corpus, foundation).and_then(|(model, report)| {
                let scores = evaluate_model(&model, corpus, Split::Test)?;
                write_scores(&run_dir, &scores)?;
                let losses: Vec<f32> = report.losses().map(|l| l.loss).collect();
                Ok(RunScores {
                    recipe: spec.name.clone(),
                    seed: *seed,
                    final_dev_loss: report.final_dev_loss,
                    initial_loss: losses.first().copied().unwrap_or(f32::NAN),
                    final_loss: tail_mean(&losses),
                    columns: score_columns(&scores),
                })
            });
            match result {
                Ok(r) => {
                    runs.push(r);
                    write_text(&dir.join("runs.csv"), &runs_csv(&runs))?;
                }
                Err(e) => {
                    write_text(&dir.join("comparison.partial.csv"), &comparison_csv(&runs))?;
                    write_text(
                        &dir.join("FAILED"),
                        &format!("recipe {} seed {seed} failed: {e}\n", spec.name),
                    )?;
                    return Err(e);
                }
            }
        }
    }
    write_text(&dir.join("comparison.csv"), &comparison_csv(&runs))?;
    write_text(&dir.join("comparison.txt"), &comparison_table(&runs))?;
    Ok(runs)
}

/// Mean of the last tenth of a loss curve (at least one value).
pub fn tail_mean(losses: &[f32]) -> f32 {
    if losses.is_empty() {
        return f32::NAN;
    }
    let k = (losses.len() / 10).max(1);
    losses[losses.len() - k..].iter().sum::<f32>() / k as f32
}
