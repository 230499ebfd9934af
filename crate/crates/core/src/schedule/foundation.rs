//! Warm starts standing in for pretrained components.
//!
//! The language model learns, from text alone, to read a sentence presented
//! as a run of its own word embeddings in the speech segment (each repeated
//! one or more times, like frames after downsampling) and either reproduce
//! it or translate it, as instructed. The encoder learns frame-level word
//! classification through a head that is thrown away afterwards. The adapter
//! is never touched.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::seeds::derive;
use crate::corpus::{Corpus, Task};
use crate::error::{Error, Result};
use crate::model::{with_eos, AssembledInput, SlmModel};
use crate::numerics::{AdamConfig, AdamState, Group, ParamStore, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FoundationSpec {
    /// Language-model steps; zero skips.
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Each word embedding is repeated 1..=max_repeat times.
    pub max_repeat: usize,
    /// Probability that a language-model example is a translation pair.
    pub translation_share: f64,
    /// Frame-level word classification steps for the encoder; zero skips.
    pub encoder_steps: usize,
    /// Seed of the warm start, independent of the recipe seed so that every
    /// run starts from the same pretrained components.
    pub seed: u64,
}

impl Default for FoundationSpec {
    fn default() -> Self {
        Self {
            steps: 5000,
            lr: 3e-3,
            batch_size: 16,
            max_repeat: 2,
            translation_share: 0.5,
            encoder_steps: 200,
            seed: 0,
        }
    }
}

impl FoundationSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| {
            Err(Error::Validation {
                field: format!("foundation.{field}"),
                reason: reason.into(),
            })
        };
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if self.max_repeat == 0 {
            return bad("max_repeat", "must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.translation_share) {
            return bad("translation_share", "must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.steps == 0 && self.encoder_steps == 0
    }
}

/// Runs both warm starts on a fresh model. Returns the language-model and
/// encoder loss curves.
pub fn pretrain(model: &mut SlmModel, corpus: &Corpus, spec: &FoundationSpec) -> Result<(Vec<f32>, Vec<f32>)> {
    let lm = pretrain_foundation(model, corpus, spec, spec.seed)?;
    let enc = pretrain_encoder(model, corpus, spec, spec.seed)?;
    Ok((lm, enc))
}

/// Trains only the `llm` group on text; returns per-step loss. Leaves every
/// parameter frozen afterwards.
pub fn pretrain_foundation(model: &mut SlmModel, corpus: &Corpus, spec: &FoundationSpec, seed: u64) -> Result<Vec<f32>> {
    if spec.steps == 0 {
        return Ok(Vec::new());
    }
    spec.validate()?;
    let (mono, cross) = (&corpus.mono.train, &corpus.cross.train);
    if mono.is_empty() {
        return Err(Error::Config("the language-model warm start needs monolingual train data".into()));
    }
    for (_, p) in model.params.iter_mut() {
        p.trainable = p.group() == Group::Llm;
    }
    let mut opt = AdamState::new(AdamConfig {
        lr: spec.lr as f32,
        ..AdamConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(derive(&[seed, 0xf0_0d]));
    let max_speech = model.config.max_speech();
    let embed = model.embed_id();
    let scale = 1.0 / spec.batch_size as f32;
    let mut losses = Vec::with_capacity(spec.steps);
    for step in 0..spec.steps {
        let mut total = 0.0f32;
        for _ in 0..spec.batch_size {
            let translate = !cross.is_empty() && rng.gen_bool(spec.translation_share);
            let u = if translate {
                &cross[rng.gen_range(0..cross.len())]
            } else {
                &mono[rng.gen_range(0..mono.len())]
            };
            let mut run = Vec::new();
            for &w in &u.words {
                let t = corpus.vocab.word_token(u.source, w);
                run.extend(std::iter::repeat_n(t, rng.gen_range(1..=spec.max_repeat)));
            }
            run.truncate(max_speech);
            let instruction = if translate {
                u.instruction
            } else {
                corpus.vocab.instruction(Task::Asr, u.source, u.source)
            };
            let mut tape = Tape::new();
            let b = model.params.bind(&mut tape);
            let speech = tape.embedding(b.var(embed), &run)?;
            let input = AssembledInput::new(run.len(), instruction, &with_eos(&u.target_tokens(&corpus.vocab)), 0)?;
            let l = model.loss_from_speech_on(&mut tape, &b, speech, &input)?;
            let value = tape.scalar(l);
            if !value.is_finite() {
                return Err(Error::Divergence {
                    stage: "foundation".into(),
                    step,
                    loss: value,
                });
            }
            total += value * scale;
            let grads = tape.backward(l)?;
            model.params.accumulate(&grads, &b, scale);
        }
        opt.adam_step(&mut model.params)?;
        losses.push(total);
    }
    model.params.set_all_trainable(false);
    Ok(losses)
}

/// Trains only the `encoder` group to classify each frame's word through a
/// throwaway linear head; returns per-step loss. Leaves every parameter
/// frozen afterwards.
pub fn pretrain_encoder(model: &mut SlmModel, corpus: &Corpus, spec: &FoundationSpec, seed: u64) -> Result<Vec<f32>> {
    if spec.encoder_steps == 0 {
        return Ok(Vec::new());
    }
    spec.validate()?;
    let train = &corpus.mono.train;
    if train.is_empty() {
        return Err(Error::Config("the encoder warm start needs monolingual train data".into()));
    }
    for (_, p) in model.params.iter_mut() {
        p.trainable = p.group() == Group::Encoder;
    }
    let (d, v) = (model.config.d_model, model.config.vocab);
    let mut rng = ChaCha8Rng::seed_from_u64(derive(&[seed, 0xe4c0]));
    let mut head = ParamStore::new();
    let hw = head.add_normal("probe.w", Group::Encoder, &[d, v], model.config.init_std, &mut rng)?;
    let hb = head.add_const("probe.b", Group::Encoder, &[v], 0.0)?;
    let cfg = AdamConfig {
        lr: spec.lr as f32,
        ..AdamConfig::default()
    };
    let (mut opt, mut head_opt) = (AdamState::new(cfg), AdamState::new(cfg));
    let mut losses = Vec::with_capacity(spec.encoder_steps);
    let scale = 1.0 / spec.batch_size as f32;
    for step in 0..spec.encoder_steps {
        let mut total = 0.0f32;
        for _ in 0..spec.batch_size {
            let u = &train[rng.gen_range(0..train.len())];
            let labels: Vec<usize> = u
                .target_tokens(&corpus.vocab)
                .iter()
                .zip(&u.frames_per_word)
                .flat_map(|(&t, &r)| std::iter::repeat_n(t, r))
                .collect();
            let mut tape = Tape::new();
            let b = model.params.bind(&mut tape);
            let hbind = head.bind(&mut tape);
            let f = tape.leaf(&u.features, false);
            let x = model.encode_on(&mut tape, &b, f)?;
            let logits = tape.linear(x, hbind.var(hw), Some(hbind.var(hb)))?;
            let l = tape.cross_entropy_mean(logits, &labels, &vec![true; labels.len()])?;
            let value = tape.scalar(l);
            if !value.is_finite() {
                return Err(Error::Divergence {
                    stage: "encoder warm start".into(),
                    step,
                    loss: value,
                });
            }
            total += value * scale;
            let grads = tape.backward(l)?;
            model.params.accumulate(&grads, &b, scale);
            head.accumulate(&grads, &hbind, scale);
        }
        opt.adam_step(&mut model.params)?;
        head_opt.adam_step(&mut head)?;
        losses.push(total);
    }
    model.params.set_all_trainable(false);
    Ok(losses)
}
