//! Speech encoder, adapter and decoder-only LM assembled into one model.
//!
//! Sequence layout fed to the decoder is `[X_align, X_I, y_0 .. y_n]`, where
//! `X_I` is a single instruction token and `y` ends with the end marker.
//! Speech and text segments use separate learned position tables.

pub mod decode;
pub mod gradcheck;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use decode::Decoded;

use crate::corpus::{VocabLayout, EOS, PAD};
use crate::error::{Error, Result};
use crate::numerics::{
    attention_layer, conv1d_downsample, conv_out_len, Binding, BlockParams, ConvParams, Group, ParamId, ParamStore,
    Real, Tape, Tensor, Var,
};

pub const ADAPTER_LAYERS: usize = 2;
pub const ADAPTER_CONVS: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_mel: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub adapter_layers: usize,
    pub adapter_stride: usize,
    pub adapter_kernel: usize,
    pub decoder_layers: usize,
    pub vocab: usize,
    /// Longest accepted feature sequence.
    pub max_frames: usize,
    /// Longest text segment (instruction plus target tokens).
    pub max_text: usize,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_mel: 16,
            d_model: 64,
            d_ff: 128,
            heads: 4,
            encoder_layers: 4,
            adapter_layers: ADAPTER_LAYERS,
            adapter_stride: 2,
            adapter_kernel: 3,
            decoder_layers: 4,
            vocab: 256,
            max_frames: 48,
            max_text: 16,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| {
            Err(Error::Validation {
                field: field.into(),
                reason: reason.into(),
            })
        };
        if self.adapter_layers != ADAPTER_LAYERS {
            return bad("adapter_layers", "the adapter has exactly 2 transformer layers");
        }
        for (f, v) in [
            ("d_mel", self.d_mel),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("heads", self.heads),
            ("encoder_layers", self.encoder_layers),
            ("adapter_stride", self.adapter_stride),
            ("adapter_kernel", self.adapter_kernel),
            ("decoder_layers", self.decoder_layers),
            ("max_frames", self.max_frames),
        ] {
            if v == 0 {
                return bad(f, "must be positive");
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.max_text < 2 {
            return bad("max_text", "need room for the instruction and one target token");
        }
        if self.vocab < 3 {
            return bad("vocab", "too small");
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad("init_std", "must be positive");
        }
        Ok(())
    }

    /// Checks that the vocabulary covers every language, special and
    /// instruction token.
    pub fn check_vocab(&self, layout: &VocabLayout) -> Result<()> {
        if layout.size() > self.vocab {
            return Err(Error::Validation {
                field: "vocab".into(),
                reason: format!("corpus needs {} tokens, model has {}", layout.size(), self.vocab),
            });
        }
        Ok(())
    }

    pub fn max_speech(&self) -> usize {
        conv_out_len(self.max_frames, self.adapter_stride)
    }

    /// Longest target (including the end marker) that fits the text segment.
    pub fn max_target(&self) -> usize {
        self.max_text - 1
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct Norm {
    pub g: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct ModelIds {
    pub enc_in: Linear,
    pub enc_pos: ParamId,
    pub enc_layers: Vec<BlockParams>,
    pub enc_out_norm: Norm,
    pub enc_out: Linear,
    pub conv: ConvParams,
    pub ad_layers: Vec<BlockParams>,
    pub ad_out_norm: Norm,
    pub ad_out: Linear,
    pub embed: ParamId,
    pub pos_speech: ParamId,
    pub pos_text: ParamId,
    pub dec_layers: Vec<BlockParams>,
    pub final_norm: Norm,
    pub head: Linear,
}

/// Encoder (θ_se), adapter (θ_adaptor) and LM (θ_llm) parameters in one
/// store, partitioned by [`Group`].
#[derive(Clone, Debug)]
pub struct SlmModel<S = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<S>,
    pub(crate) ids: ModelIds,
}

/// Token ids and loss mask for one teacher-forced sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct AssembledInput {
    pub speech_len: usize,
    /// `[X_I, y_0 .., y_n, PAD ..]`.
    pub text: Vec<usize>,
    /// Over the whole sequence; true only on target positions.
    pub loss_mask: Vec<bool>,
}

impl AssembledInput {
    /// `targets` must be non-empty and end with the end marker; `padding`
    /// masked positions are appended after it.
    pub fn new(speech_len: usize, instruction: usize, targets: &[usize], padding: usize) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::DegenerateBatch("empty target sequence".into()));
        }
        if targets.last() != Some(&EOS) {
            return Err(Error::DegenerateBatch("target must end with the end marker".into()));
        }
        let mut text = Vec::with_capacity(1 + targets.len() + padding);
        text.push(instruction);
        text.extend_from_slice(targets);
        text.extend(std::iter::repeat_n(PAD, padding));
        let mut loss_mask = vec![false; speech_len + 1];
        loss_mask.extend(std::iter::repeat_n(true, targets.len()));
        loss_mask.extend(std::iter::repeat_n(false, padding));
        Ok(Self {
            speech_len,
            text,
            loss_mask,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.speech_len + self.text.len()
    }
}

/// Appends the end marker to target word tokens.
pub fn with_eos(tokens: &[usize]) -> Vec<usize> {
    let mut v = tokens.to_vec();
    v.push(EOS);
    v
}

impl SlmModel<f32> {
    /// Fresh model with N(0, init_std²) weights, unit norms and zero biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let c = &config;
        let (d, std) = (c.d_model, c.init_std);
        let rng = &mut rng;
        let mut linear = |s: &mut ParamStore<f32>, name: &str, g: Group, i: usize, o: usize| -> Result<Linear> {
            Ok(Linear {
                w: s.add_normal(format!("{name}.w"), g, &[i, o], std, rng)?,
                b: s.add_const(format!("{name}.b"), g, &[o], 0.0)?,
            })
        };
        let norm = |s: &mut ParamStore<f32>, name: &str, g: Group| -> Result<Norm> {
            Ok(Norm {
                g: s.add_const(format!("{name}.gamma"), g, &[d], 1.0)?,
                b: s.add_const(format!("{name}.beta"), g, &[d], 0.0)?,
            })
        };

        let enc_in = linear(&mut s, "encoder.input", Group::Encoder, c.d_mel, d)?;
        let enc_out = linear(&mut s, "encoder.output", Group::Encoder, d, d)?;
        let ad_out = linear(&mut s, "adapter.output", Group::Adapter, d, d)?;
        let head = linear(&mut s, "llm.head", Group::Llm, d, c.vocab)?;
        let mut rng2 = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_b10c);
        let rng2 = &mut rng2;
        let enc_pos = s.add_normal("encoder.pos", Group::Encoder, &[c.max_frames, d], std, rng2)?;
        let enc_layers = (0..c.encoder_layers)
            .map(|i| BlockParams::register(&mut s, &format!("encoder.layer{i}"), Group::Encoder, d, c.d_ff, std, rng2))
            .collect::<Result<Vec<_>>>()?;
        let enc_out_norm = norm(&mut s, "encoder.output.norm", Group::Encoder)?;
        let conv = ConvParams::register(&mut s, "adapter.conv", Group::Adapter, d, d, c.adapter_kernel, std, rng2)?;
        let ad_layers = (0..c.adapter_layers)
            .map(|i| BlockParams::register(&mut s, &format!("adapter.layer{i}"), Group::Adapter, d, c.d_ff, std, rng2))
            .collect::<Result<Vec<_>>>()?;
        let ad_out_norm = norm(&mut s, "adapter.output.norm", Group::Adapter)?;
        let embed = s.add_normal("llm.embed", Group::Llm, &[c.vocab, d], std, rng2)?;
        let pos_speech = s.add_normal("llm.pos_speech", Group::Llm, &[c.max_speech(), d], std, rng2)?;
        let pos_text = s.add_normal("llm.pos_text", Group::Llm, &[c.max_text, d], std, rng2)?;
        let dec_layers = (0..c.decoder_layers)
            .map(|i| BlockParams::register(&mut s, &format!("llm.layer{i}"), Group::Llm, d, c.d_ff, std, rng2))
            .collect::<Result<Vec<_>>>()?;
        let final_norm = norm(&mut s, "llm.final_norm", Group::Llm)?;

        Ok(Self {
            config,
            params: s,
            ids: ModelIds {
                enc_in,
                enc_pos,
                enc_layers,
                enc_out_norm,
                enc_out,
                conv,
                ad_layers,
                ad_out_norm,
                ad_out,
                embed,
                pos_speech,
                pos_text,
                dec_layers,
                final_norm,
                head,
            },
        })
    }

    /// Overwrites every parameter by name; names and shapes must match.
    pub fn load_values(&mut self, values: &[(String, Tensor<f32>)]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Config(format!(
                "expected {} tensors, got {}",
                self.params.len(),
                values.len()
            )));
        }
        for (name, t) in values {
            let id = self
                .params
                .id(name)
                .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
            let p = self.params.get_mut(id);
            if p.tensor.shape() != t.shape() {
                return Err(Error::Dimension {
                    op: "load_values",
                    lhs: p.tensor.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            p.tensor = t.clone();
        }
        Ok(())
    }

    /// Copies the values of every parameter in `groups` from a model with
    /// the same configuration.
    pub fn copy_groups(&mut self, from: &SlmModel, groups: &[Group]) -> Result<()> {
        if from.config != self.config {
            return Err(Error::Config("cannot copy parameters between different model configs".into()));
        }
        for ((_, dst), (_, src)) in self.params.iter_mut().zip(from.params.iter()) {
            if groups.contains(&src.group()) {
                dst.tensor = src.tensor.clone();
            }
        }
        Ok(())
    }
}

impl<S: Real> SlmModel<S> {
    pub fn cast<T: Real>(&self) -> SlmModel<T> {
        SlmModel {
            config: self.config.clone(),
            params: self.params.cast(),
            ids: self.ids.clone(),
        }
    }

    /// Parameter ids of encoder transformer layer `i`.
    pub fn encoder_layer_ids(&self, i: usize) -> Vec<ParamId> {
        self.ids.enc_layers[i].ids().to_vec()
    }

    /// The encoder's output projection (and its norm).
    pub fn encoder_output_ids(&self) -> Vec<ParamId> {
        let i = &self.ids;
        vec![i.enc_out_norm.g, i.enc_out_norm.b, i.enc_out.w, i.enc_out.b]
    }

    /// The encoder's input projection and position table.
    pub fn encoder_input_ids(&self) -> Vec<ParamId> {
        let i = &self.ids;
        vec![i.enc_in.w, i.enc_in.b, i.enc_pos]
    }

    pub fn instruction_embedding_row(&self, token: usize) -> &[S] {
        let t = &self.params.get(self.ids.embed).tensor;
        t.row(token)
    }

    pub fn embed_id(&self) -> ParamId {
        self.ids.embed
    }

    /// `M → X_ling`: input projection plus positions, then non-causal
    /// encoder layers and the output projection.
    pub fn encode_on(&self, tape: &mut Tape<S>, b: &Binding, features: Var) -> Result<Var> {
        let t = tape.shape(features)[0];
        if t > self.config.max_frames {
            return Err(Error::Length {
                len: t,
                max: self.config.max_frames,
            });
        }
        let i = &self.ids;
        let x = tape.linear(features, b.var(i.enc_in.w), Some(b.var(i.enc_in.b)))?;
        let positions: Vec<usize> = (0..t).collect();
        let pos = tape.embedding(b.var(i.enc_pos), &positions)?;
        let mut x = tape.add(x, pos)?;
        for layer in &i.enc_layers {
            x = attention_layer(tape, x, &layer.bind(b), self.config.heads, false)?;
        }
        let x = tape.layer_norm(x, b.var(i.enc_out_norm.g), b.var(i.enc_out_norm.b))?;
        tape.linear(x, b.var(i.enc_out.w), Some(b.var(i.enc_out.b)))
    }

    /// `X_ling → X_align`: strided convolution then the adapter layers.
    pub fn adapt_on(&self, tape: &mut Tape<S>, b: &Binding, x_ling: Var) -> Result<Var> {
        let i = &self.ids;
        let mut x = conv1d_downsample(tape, x_ling, &i.conv.bind(b), self.config.adapter_stride)?;
        for layer in &i.ad_layers {
            x = attention_layer(tape, x, &layer.bind(b), self.config.heads, false)?;
        }
        let x = tape.layer_norm(x, b.var(i.ad_out_norm.g), b.var(i.ad_out_norm.b))?;
        tape.linear(x, b.var(i.ad_out.w), Some(b.var(i.ad_out.b)))
    }

    /// Causal decoder over `[speech, text]`; returns final-norm hidden states.
    pub fn decode_hidden_on(&self, tape: &mut Tape<S>, b: &Binding, speech: Var, text: &[usize]) -> Result<Var> {
        let c = &self.config;
        let i = &self.ids;
        let ta = tape.shape(speech)[0];
        if ta > c.max_speech() {
            return Err(Error::Length {
                len: ta,
                max: c.max_speech(),
            });
        }
        if text.len() > c.max_text {
            return Err(Error::Length {
                len: text.len(),
                max: c.max_text,
            });
        }
        let sp_pos: Vec<usize> = (0..ta).collect();
        let sp = tape.embedding(b.var(i.pos_speech), &sp_pos)?;
        let sp = tape.add(speech, sp)?;
        let tx = tape.embedding(b.var(i.embed), text)?;
        let tx_pos: Vec<usize> = (0..text.len()).collect();
        let tp = tape.embedding(b.var(i.pos_text), &tx_pos)?;
        let tx = tape.add(tx, tp)?;
        let mut x = tape.concat_rows(&[sp, tx])?;
        for layer in &i.dec_layers {
            x = attention_layer(tape, x, &layer.bind(b), c.heads, true)?;
        }
        tape.layer_norm(x, b.var(i.final_norm.g), b.var(i.final_norm.b))
    }

    pub fn logits_on(&self, tape: &mut Tape<S>, b: &Binding, hidden: Var, start: usize, len: usize) -> Result<Var> {
        let h = tape.slice_rows(hidden, start, len)?;
        tape.linear(h, b.var(self.ids.head.w), Some(b.var(self.ids.head.b)))
    }

    /// Teacher-forced mean negative log-likelihood over the target
    /// positions of `input`, given speech embeddings `x_align`.
    pub fn loss_from_speech_on(
        &self,
        tape: &mut Tape<S>,
        b: &Binding,
        x_align: Var,
        input: &AssembledInput,
    ) -> Result<Var> {
        if tape.shape(x_align)[0] != input.speech_len {
            return Err(Error::Dimension {
                op: "assembled input",
                lhs: tape.shape(x_align).to_vec(),
                rhs: vec![input.speech_len],
            });
        }
        let hidden = self.decode_hidden_on(tape, b, x_align, &input.text)?;
        // Hidden state at position p predicts the token at p + 1.
        let n = input.text.len() - 1;
        let logits = self.logits_on(tape, b, hidden, input.speech_len, n)?;
        let targets = &input.text[1..];
        let mask = &input.loss_mask[input.speech_len + 1..];
        tape.cross_entropy_mean(logits, targets, mask)
    }

    /// Full forward: features → loss over `targets` (which end with EOS).
    pub fn compute_loss_on(
        &self,
        tape: &mut Tape<S>,
        b: &Binding,
        features: &Tensor<S>,
        instruction: usize,
        targets: &[usize],
        padding: usize,
    ) -> Result<Var> {
        if features.rows() == 0 {
            return Err(Error::EmptyInput("features"));
        }
        let f = tape.leaf(features, false);
        let x = self.encode_on(tape, b, f)?;
        let x = self.adapt_on(tape, b, x)?;
        let input = AssembledInput::new(tape.shape(x)[0], instruction, targets, padding)?;
        self.loss_from_speech_on(tape, b, x, &input)
    }

    /// Scalar loss value without gradients.
    pub fn compute_loss(&self, features: &Tensor<S>, instruction: usize, targets: &[usize]) -> Result<S> {
        let mut tape = Tape::new();
        let b = self.bind_frozen(&mut tape);
        let l = self.compute_loss_on(&mut tape, &b, features, instruction, targets, 0)?;
        Ok(tape.scalar(l))
    }

    /// Binds every parameter without requesting gradients.
    pub fn bind_frozen(&self, tape: &mut Tape<S>) -> Binding {
        Binding::from_vars(self.params.iter().map(|(_, p)| tape.leaf(&p.tensor, false)).collect())
    }

    pub fn encode_speech(&self, features: &Tensor<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let b = self.bind_frozen(&mut tape);
        let f = tape.leaf(features, false);
        let x = self.encode_on(&mut tape, &b, f)?;
        Ok(tape.to_tensor(x))
    }

    pub fn adapt(&self, x_ling: &Tensor<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let b = self.bind_frozen(&mut tape);
        let f = tape.leaf(x_ling, false);
        let x = self.adapt_on(&mut tape, &b, f)?;
        Ok(tape.to_tensor(x))
    }

    /// Number of parameters (tensors) in each group.
    pub fn group_sizes(&self) -> [usize; 3] {
        let mut n = [0; 3];
        for (_, p) in self.params.iter() {
            n[p.group() as usize] += 1;
        }
        n
    }
}

#[cfg(test)]
mod tests;
