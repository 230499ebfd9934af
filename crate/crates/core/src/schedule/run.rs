use serde::Serialize;

use super::sampler::{DrawRecord, MixtureSampler};
use super::{trainable_ids, RecipeSpec, StageSpec};
use crate::corpus::seeds::derive;
use crate::corpus::{Corpus, Split, Utterance};
use crate::error::{Error, Result};
use crate::model::{with_eos, SlmModel};
use crate::numerics::{AdamConfig, AdamState, Group, Tape};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossRecord {
    /// 1-based optimizer step across the whole recipe.
    pub step: usize,
    pub stage: String,
    pub phase: String,
    pub loss: f32,
}

/// Content digests of one parameter group around one phase. The `frozen_*`
/// digests cover the group's parameters that were not trainable in the
/// phase.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditRecord {
    pub stage: String,
    pub phase: String,
    pub group: Group,
    pub trainable: usize,
    pub frozen: usize,
    pub frozen_pre: String,
    pub frozen_post: String,
    pub group_pre: String,
    pub group_post: String,
}

impl AuditRecord {
    pub fn frozen_unchanged(&self) -> bool {
        self.frozen_pre == self.frozen_post
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageReport {
    pub stage: String,
    pub losses: Vec<LossRecord>,
    pub audit: Vec<AuditRecord>,
    pub draws: Vec<DrawRecord>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RecipeReport {
    pub recipe: String,
    pub stages: Vec<StageReport>,
    pub final_dev_loss: f64,
}

impl RecipeReport {
    pub fn losses(&self) -> impl Iterator<Item = &LossRecord> {
        self.stages.iter().flat_map(|s| &s.losses)
    }

    pub fn audit(&self) -> impl Iterator<Item = &AuditRecord> {
        self.stages.iter().flat_map(|s| &s.audit)
    }

    pub fn draws(&self) -> impl Iterator<Item = &DrawRecord> {
        self.stages.iter().flat_map(|s| &s.draws)
    }
}

/// Mutable state threaded through the stages of one recipe run.
pub struct TrainContext<'a> {
    pub corpus: &'a Corpus,
    pub seed: u64,
    pub batch_size: usize,
    pub optimizer: AdamState,
    pub global_step: usize,
}

impl<'a> TrainContext<'a> {
    pub fn new(corpus: &'a Corpus, seed: u64, batch_size: usize) -> Self {
        Self {
            corpus,
            seed,
            batch_size,
            optimizer: AdamState::new(AdamConfig::default()),
            global_step: 0,
        }
    }
}

/// One optimizer step on the mean loss of `batch`. Returns the loss before
/// the update. Each utterance gets its own tape; gradients accumulate.
pub fn train_step(model: &mut SlmModel, optimizer: &mut AdamState, batch: &[&Utterance], corpus: &Corpus) -> Result<f32> {
    if batch.is_empty() {
        return Err(Error::DegenerateBatch("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f32;
    let mut total = 0.0f32;
    model.params.clear_grads();
    for u in batch {
        let mut tape = Tape::new();
        let b = model.params.bind(&mut tape);
        let targets = with_eos(&u.target_tokens(&corpus.vocab));
        let l = model.compute_loss_on(&mut tape, &b, &u.features, u.instruction, &targets, 0)?;
        let value = tape.scalar(l);
        if !value.is_finite() {
            model.params.clear_grads();
            return Err(Error::NonFinite("training loss".into()));
        }
        total += value * scale;
        let grads = tape.backward(l)?;
        model.params.accumulate(&grads, &b, scale);
    }
    optimizer.adam_step(&mut model.params)?;
    Ok(total)
}

fn group_digests(model: &SlmModel, g: Group) -> (String, String) {
    (
        model.params.digest(|p| p.group() == g && !p.trainable),
        model.params.digest(|p| p.group() == g),
    )
}

/// Runs every phase of `stage` with only the phase's trainable set updating.
pub fn run_stage(model: &mut SlmModel, stage: &StageSpec, stage_index: usize, ctx: &mut TrainContext) -> Result<StageReport> {
    stage.validate()?;
    let corpus = ctx.corpus;
    let mut sampler = MixtureSampler::new(stage, corpus, derive(&[ctx.seed, 0x5a3b1e, stage_index as u64]))?;
    let mut report = StageReport {
        stage: stage.name.clone(),
        ..StageReport::default()
    };
    for phase in &stage.phases {
        let ids = trainable_ids(model, phase)?;
        for (id, p) in model.params.iter_mut() {
            p.trainable = ids.contains(&id);
        }
        let pre: Vec<(String, String)> = Group::ALL.iter().map(|&g| group_digests(model, g)).collect();
        ctx.optimizer.set_lr(phase.lr as f32);
        for _ in 0..phase.steps {
            ctx.global_step += 1;
            let mut batch = Vec::with_capacity(ctx.batch_size);
            for _ in 0..ctx.batch_size {
                let (kind, index) = sampler.draw(corpus);
                let u = &corpus.dataset(kind).train[index];
                report.draws.push(DrawRecord {
                    step: ctx.global_step,
                    stage: stage.name.clone(),
                    phase: phase.name.clone(),
                    dataset: kind,
                    task: u.task,
                    index,
                });
                batch.push(u);
            }
            let loss = match train_step(model, &mut ctx.optimizer, &batch, corpus) {
                Err(Error::NonFinite(_)) => f32::NAN,
                other => other?,
            };
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    stage: format!("{}/{}", stage.name, phase.name),
                    step: ctx.global_step,
                    loss,
                });
            }
            report.losses.push(LossRecord {
                step: ctx.global_step,
                stage: stage.name.clone(),
                phase: phase.name.clone(),
                loss,
            });
        }
        for (&g, (frozen_pre, group_pre)) in Group::ALL.iter().zip(pre) {
            let (frozen_post, group_post) = group_digests(model, g);
            let in_group: Vec<bool> = model
                .params
                .iter()
                .filter(|(_, p)| p.group() == g)
                .map(|(_, p)| p.trainable)
                .collect();
            report.audit.push(AuditRecord {
                stage: stage.name.clone(),
                phase: phase.name.clone(),
                group: g,
                trainable: in_group.iter().filter(|&&t| t).count(),
                frozen: in_group.iter().filter(|&&t| !t).count(),
                frozen_pre,
                frozen_post,
                group_pre,
                group_post,
            });
        }
    }
    model.params.set_all_trainable(false);
    Ok(report)
}

/// Mean teacher-forced loss over a split (both tasks).
pub fn dev_loss(model: &SlmModel, corpus: &Corpus, split: Split) -> Result<f64> {
    let mut total = 0.0f64;
    let mut n = 0usize;
    for u in corpus.split(split) {
        let targets = with_eos(&u.target_tokens(&corpus.vocab));
        total += model.compute_loss(&u.features, u.instruction, &targets)? as f64;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyInput("evaluation split"));
    }
    Ok(total / n as f64)
}

/// Runs the stages of `recipe` in order on `model`, calling `after_stage`
/// with each finished stage (e.g. to write a checkpoint).
pub fn run_recipe(
    recipe: &RecipeSpec,
    corpus: &Corpus,
    model: &mut SlmModel,
    mut after_stage: impl FnMut(usize, &StageReport, &SlmModel) -> Result<()>,
) -> Result<RecipeReport> {
    recipe.validate()?;
    if model.config != recipe.model {
        return Err(Error::Config("model does not match the recipe's model config".into()));
    }
    model.config.check_vocab(&corpus.vocab)?;
    let mut ctx = TrainContext::new(corpus, recipe.seed, recipe.batch_size);
    let mut report = RecipeReport {
        recipe: recipe.name.clone(),
        ..RecipeReport::default()
    };
    for (i, stage) in recipe.stages.iter().enumerate() {
        let r = run_stage(model, stage, i, &mut ctx)?;
        after_stage(i, &r, model)?;
        report.stages.push(r);
    }
    report.final_dev_loss = dev_loss(model, corpus, Split::Dev)?;
    Ok(report)
}
