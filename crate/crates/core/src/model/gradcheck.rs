//! Finite-difference checks of whole model components in `f64`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{with_eos, ModelConfig, SlmModel};
use crate::error::Result;
use crate::numerics::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::numerics::{Binding, Group, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    /// Features and encoder parameters → encoder output.
    Encoder,
    /// Encoder output and adapter parameters → adapter output.
    Adapter,
    /// Every parameter → teacher-forced loss.
    Loss,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Encoder, Component::Adapter, Component::Loss];

    pub fn name(self) -> &'static str {
        match self {
            Component::Encoder => "model.encoder",
            Component::Adapter => "model.adapter",
            Component::Loss => "model.loss",
        }
    }
}

/// A small configuration that keeps the checks fast.
pub fn check_config() -> ModelConfig {
    ModelConfig {
        d_mel: 4,
        d_model: 8,
        d_ff: 16,
        heads: 2,
        encoder_layers: 2,
        decoder_layers: 2,
        vocab: 12,
        max_frames: 8,
        max_text: 6,
        init_std: 0.3,
        ..ModelConfig::default()
    }
}

/// Checks `component` at `frames` input frames, sampling at most
/// `max_per_leaf` elements of each leaf.
pub fn check_component(component: Component, frames: usize, max_per_leaf: usize, seed: u64) -> Result<GradCheckReport> {
    let config = check_config();
    let model: SlmModel<f64> = SlmModel::new(config.clone(), seed)?.cast();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6a7d);
    let mut gauss = |shape: &[usize]| Tensor::<f64>::from_fn(shape, |_| StandardNormal.sample(&mut rng));
    let (input, groups) = match component {
        Component::Encoder => (gauss(&[frames, config.d_mel]), vec![Group::Encoder]),
        Component::Adapter => (gauss(&[frames, config.d_model]), vec![Group::Adapter]),
        Component::Loss => (gauss(&[frames, config.d_mel]), Group::ALL.to_vec()),
    };
    let checked: Vec<usize> = model
        .params
        .iter()
        .enumerate()
        .filter(|(_, (_, p))| groups.contains(&p.group()))
        .map(|(i, _)| i)
        .collect();
    let mut leaves = vec![input];
    leaves.extend(checked.iter().map(|&i| model.params.iter().nth(i).unwrap().1.tensor.clone()));
    let targets = with_eos(&[5, 9, 2]);
    let build = |tape: &mut Tape<f64>, vars: &[Var]| -> Result<Var> {
        let mut next = vars[1..].iter();
        let bound: Vec<Var> = model
            .params
            .iter()
            .enumerate()
            .map(|(i, (_, p))| {
                if checked.contains(&i) {
                    *next.next().expect("one var per checked parameter")
                } else {
                    tape.leaf(&p.tensor, false)
                }
            })
            .collect();
        let b = Binding::from_vars(bound);
        match component {
            Component::Encoder => model.encode_on(tape, &b, vars[0]),
            Component::Adapter => model.adapt_on(tape, &b, vars[0]),
            Component::Loss => {
                let x = model.encode_on(tape, &b, vars[0])?;
                let x = model.adapt_on(tape, &b, x)?;
                let input = super::AssembledInput::new(tape.shape(x)[0], 3, &targets, 1)?;
                model.loss_from_speech_on(tape, &b, x, &input)
            }
        }
    };
    grad_check(
        &leaves,
        build,
        GradCheckOptions {
            seed,
            max_per_leaf: Some(max_per_leaf),
            ..GradCheckOptions::default()
        },
    )
}
