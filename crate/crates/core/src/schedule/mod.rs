//! Stage-wise training: declarative stages with phase-wise freeze policies
//! and per-stage data mixtures, plus the built-in recipes.

mod foundation;
mod run;
mod sampler;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub use foundation::{pretrain, pretrain_encoder, pretrain_foundation, FoundationSpec};
pub use run::{
    dev_loss, run_recipe, run_stage, train_step, AuditRecord, LossRecord, RecipeReport, StageReport, TrainContext,
};
pub use sampler::{DrawRecord, MixtureSampler};

use crate::corpus::DatasetKind;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SlmModel};
use crate::numerics::{Group, ParamId, Real};

pub const RECIPE_SCHEMA: &str = "partlab-recipe/1";

pub const PART: &str = "part";
pub const TWO_STAGE: &str = "two_stage";
pub const THREE_STAGE_MIXED: &str = "three_stage_mixed";
pub const PART_FULL_UNFREEZE: &str = "part_full_unfreeze";
pub const BUILTIN_NAMES: [&str; 4] = [PART, TWO_STAGE, THREE_STAGE_MIXED, PART_FULL_UNFREEZE];

/// One freeze configuration with its own step budget and learning rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSpec {
    pub name: String,
    pub groups: Vec<Group>,
    /// Restricts the encoder to its last `k` transformer layers plus the
    /// output projection.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder_last: Option<usize>,
    pub steps: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureEntry {
    pub dataset: DatasetKind,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub name: String,
    pub phases: Vec<PhaseSpec>,
    pub mixture: Vec<MixtureEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecipeSpec {
    pub schema: String,
    pub name: String,
    pub seed: u64,
    pub batch_size: usize,
    /// Path of the corpus directory the recipe trains on, if pinned.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<String>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub foundation: FoundationSpec,
    pub stages: Vec<StageSpec>,
}

impl StageSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: String, reason: &str| {
            Err(Error::Validation {
                field,
                reason: reason.into(),
            })
        };
        if self.phases.is_empty() {
            return bad(format!("{}.phases", self.name), "a stage needs at least one phase");
        }
        for p in &self.phases {
            let f = |x: &str| format!("{}.{}.{x}", self.name, p.name);
            if p.steps == 0 {
                return bad(f("steps"), "step budget must be positive");
            }
            if !(p.lr > 0.0 && p.lr.is_finite()) {
                return bad(f("lr"), "learning rate must be positive");
            }
            if p.groups.is_empty() {
                return bad(f("groups"), "no trainable group");
            }
            if p.encoder_last.is_some() && !p.groups.contains(&Group::Encoder) {
                return bad(f("encoder_last"), "layer subset given but the encoder is frozen");
            }
            if p.encoder_last == Some(0) {
                return bad(f("encoder_last"), "must be positive");
            }
        }
        if self.mixture.iter().all(|m| m.weight <= 0.0) {
            return Err(Error::Config(format!("stage `{}` has an empty data mixture", self.name)));
        }
        if self.mixture.iter().any(|m| !(m.weight >= 0.0 && m.weight.is_finite())) {
            return bad(format!("{}.mixture", self.name), "weights must be finite and non-negative");
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.phases.iter().map(|p| p.steps).sum()
    }

    /// Datasets with positive weight.
    pub fn datasets(&self) -> BTreeSet<DatasetKind> {
        self.mixture.iter().filter(|m| m.weight > 0.0).map(|m| m.dataset).collect()
    }
}

impl RecipeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.schema != RECIPE_SCHEMA {
            return Err(Error::Validation {
                field: "schema".into(),
                reason: format!("expected `{RECIPE_SCHEMA}`"),
            });
        }
        if self.stages.is_empty() {
            return Err(Error::Validation {
                field: "stages".into(),
                reason: "a recipe needs at least one stage".into(),
            });
        }
        if self.batch_size == 0 {
            return Err(Error::Validation {
                field: "batch_size".into(),
                reason: "must be positive".into(),
            });
        }
        self.model.validate()?;
        for s in &self.stages {
            s.validate()?;
            for p in &s.phases {
                if let Some(k) = p.encoder_last {
                    if k > self.model.encoder_layers {
                        return Err(Error::Config(format!(
                            "phase `{}` unfreezes the last {k} encoder layers but the encoder has {}",
                            p.name, self.model.encoder_layers
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let r: Self = toml::from_str(text).map_err(|e| Error::parse("recipe", e))?;
        r.validate()?;
        Ok(r)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("recipe serializes")
    }

    pub fn total_steps(&self) -> usize {
        self.stages.iter().map(StageSpec::steps).sum()
    }

    /// Number of distinct (stage, phase) freeze configurations.
    pub fn phase_count(&self) -> usize {
        self.stages.iter().map(|s| s.phases.len()).sum()
    }
}

/// Exact set of parameter ids a phase trains.
pub fn trainable_ids<S: Real>(model: &SlmModel<S>, phase: &PhaseSpec) -> Result<BTreeSet<ParamId>> {
    let mut ids = BTreeSet::new();
    for &g in &phase.groups {
        match (g, phase.encoder_last) {
            (Group::Encoder, Some(k)) => {
                let n = model.config.encoder_layers;
                if k > n {
                    return Err(Error::Config(format!(
                        "cannot unfreeze the last {k} layers of a {n}-layer encoder"
                    )));
                }
                for i in n - k..n {
                    ids.extend(model.encoder_layer_ids(i));
                }
                ids.extend(model.encoder_output_ids());
            }
            _ => ids.extend(model.params.ids_in_group(g)),
        }
    }
    Ok(ids)
}

/// Trainable parameter names of phase `phase` of stage `stage`.
pub fn trainable_set<S: Real>(
    model: &SlmModel<S>,
    recipe: &RecipeSpec,
    stage: usize,
    phase: usize,
) -> Result<BTreeSet<String>> {
    let st = recipe
        .stages
        .get(stage)
        .ok_or(Error::Index {
            index: stage,
            bound: recipe.stages.len(),
        })?;
    let ph = st.phases.get(phase).ok_or(Error::Index {
        index: phase,
        bound: st.phases.len(),
    })?;
    Ok(trainable_ids(model, ph)?
        .into_iter()
        .map(|id| model.params.get(id).name().to_string())
        .collect())
}

/// Step budgets shared by the built-in recipes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Budget {
    pub stage1: usize,
    /// Split 50/50 between the two phases in progressive recipes.
    pub stage2: usize,
    pub stage3: usize,
    pub batch_size: usize,
}

impl Default for Budget {
    fn default() -> Self {
        Self {
            stage1: 600,
            stage2: 600,
            stage3: 1200,
            batch_size: 16,
        }
    }
}

pub const LR_STAGE1: f64 = 3e-3;
pub const LR_STAGE2: f64 = 1e-3;
pub const LR_STAGE3: f64 = 3e-4;

fn mono() -> Vec<MixtureEntry> {
    vec![MixtureEntry {
        dataset: DatasetKind::Mono,
        weight: 1.0,
    }]
}

fn mixed() -> Vec<MixtureEntry> {
    vec![
        MixtureEntry {
            dataset: DatasetKind::Mono,
            weight: 1.0,
        },
        MixtureEntry {
            dataset: DatasetKind::Cross,
            weight: 1.0,
        },
    ]
}

fn phase(name: &str, groups: &[Group], encoder_last: Option<usize>, steps: usize, lr: f64) -> PhaseSpec {
    PhaseSpec {
        name: name.into(),
        groups: groups.to_vec(),
        encoder_last,
        steps,
        lr,
    }
}

/// Progressive unfreezing depth: the upper half of the encoder.
pub fn default_encoder_last(config: &ModelConfig) -> usize {
    config.encoder_layers.div_ceil(2)
}

/// Builds one of the built-in recipes. All four consume
/// `stage1 + stage2 + stage3` optimizer steps.
pub fn builtin_recipe(name: &str, budget: Budget, model: &ModelConfig, seed: u64) -> Result<RecipeSpec> {
    use Group::*;
    let (s1, s2, s3) = (budget.stage1, budget.stage2, budget.stage3);
    let half = s2 / 2;
    let k = default_encoder_last(model);
    let stage1 = |mixture| StageSpec {
        name: "stage1".into(),
        phases: vec![phase("adapter", &[Adapter], None, s1, LR_STAGE1)],
        mixture,
    };
    let progressive = vec![
        phase("last_k", &[Adapter, Encoder], Some(k), half, LR_STAGE2),
        phase("full", &[Adapter, Encoder], None, s2 - half, LR_STAGE2),
    ];
    let stage2 = |mixture, phases| StageSpec {
        name: "stage2".into(),
        phases,
        mixture,
    };
    let stage3 = StageSpec {
        name: "stage3".into(),
        phases: vec![phase("joint", &[Adapter, Encoder, Llm], None, s3, LR_STAGE3)],
        mixture: mixed(),
    };
    let stages = match name {
        PART => vec![stage1(mono()), stage2(mono(), progressive), stage3],
        THREE_STAGE_MIXED => vec![stage1(mixed()), stage2(mixed(), progressive), stage3],
        PART_FULL_UNFREEZE => vec![
            stage1(mono()),
            stage2(mono(), vec![phase("full", &[Adapter, Encoder], None, s2, LR_STAGE2)]),
            stage3,
        ],
        TWO_STAGE => vec![
            stage1(mixed()),
            stage2(
                mixed(),
                vec![phase("full", &[Adapter, Encoder], None, s2 + s3, LR_STAGE2)],
            ),
        ],
        other => {
            return Err(Error::Config(format!(
                "unknown recipe `{other}` (known: {})",
                BUILTIN_NAMES.join(", ")
            )))
        }
    };
    let r = RecipeSpec {
        schema: RECIPE_SCHEMA.into(),
        name: name.into(),
        seed,
        batch_size: budget.batch_size,
        corpus: None,
        model: model.clone(),
        foundation: FoundationSpec::default(),
        stages,
    };
    r.validate()?;
    Ok(r)
}

pub fn builtin_recipes(budget: Budget, model: &ModelConfig, seed: u64) -> Vec<RecipeSpec> {
    BUILTIN_NAMES
        .iter()
        .map(|n| builtin_recipe(n, budget, model, seed).expect("built-in recipes are valid"))
        .collect()
}
