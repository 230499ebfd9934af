use std::collections::HashMap;
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::kernels::Real;
use super::tape::{Gradients, Tape, Var};
use super::tensor::{Tensor, ToBits};
use crate::error::{Error, Result};

/// The three parameter groups of the speech-language model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Encoder,
    Adapter,
    Llm,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Encoder, Group::Adapter, Group::Llm];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Encoder => "encoder",
            Group::Adapter => "adapter",
            Group::Llm => "llm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(Group::Encoder),
            "adapter" => Ok(Group::Adapter),
            "llm" => Ok(Group::Llm),
            other => Err(Error::Config(format!("unknown parameter group `{other}`"))),
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param<S = f32> {
    name: String,
    group: Group,
    pub tensor: Tensor<S>,
    pub trainable: bool,
}

impl<S> Param<S> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn group(&self) -> Group {
        self.group
    }
}

/// Owns every parameter of a model, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S = f32> {
    params: Vec<Param<S>>,
    index: HashMap<String, ParamId>,
}

/// Tape variables for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }
}

impl<S: Real> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, tensor: Tensor<S>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            group,
            tensor,
            trainable: true,
        });
        Ok(id)
    }

    /// Registers a tensor drawn from N(0, std²).
    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        group: Group,
        shape: &[usize],
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let t = Tensor::from_fn(shape, |_| S::lit(normal.sample(rng)));
        self.add(name, group, t)
    }

    pub fn add_const(&mut self, name: impl Into<String>, group: Group, shape: &[usize], v: f64) -> Result<ParamId> {
        let t = Tensor::from_fn(shape, |_| S::lit(v));
        self.add(name, group, t)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<S> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<S>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_in_group(&self, group: Group) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.group == group).map(|(id, _)| id).collect()
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    /// Copies every parameter onto the tape as a leaf; only trainable
    /// parameters request gradients.
    pub fn bind(&self, tape: &mut Tape<S>) -> Binding {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(&p.tensor, p.trainable))
            .collect();
        Binding { vars }
    }

    /// Adds `scale * dL/dparam` from a backward pass into each parameter's
    /// gradient slot. Parameters the loss did not reach are left untouched.
    pub fn accumulate(&mut self, grads: &Gradients<S>, binding: &Binding, scale: S) {
        for (p, &v) in self.params.iter_mut().zip(&binding.vars) {
            if let Some(g) = grads.get(v) {
                p.tensor.accumulate_grad(g, scale);
            }
        }
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.clear_grad();
        }
    }

    pub fn cast<T: Real>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    tensor: p.tensor.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

impl<S: Real + ToBits> ParamStore<S> {
    /// SHA-256 over (name, shape, raw little-endian values) of the selected
    /// parameters, in registration order.
    pub fn digest(&self, mut select: impl FnMut(&Param<S>) -> bool) -> String {
        let mut hasher = Sha256::new();
        let mut buf = Vec::new();
        for p in self.params.iter().filter(|p| select(p)) {
            hasher.update(p.name.as_bytes());
            hasher.update([0u8]);
            for &e in p.tensor.shape() {
                hasher.update((e as u64).to_le_bytes());
            }
            buf.clear();
            for &v in p.tensor.data() {
                v.le_bytes(&mut buf);
            }
            hasher.update(&buf);
        }
        hex::encode(hasher.finalize())
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.group == b.group && a.tensor.bit_eq(&b.tensor))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.add_const("a.w", Group::Adapter, &[2], 0.0).unwrap();
        assert!(s.add_const("a.w", Group::Llm, &[2], 0.0).is_err());
    }

    #[test]
    fn digest_tracks_content() {
        let mut s = ParamStore::<f32>::new();
        let id = s.add_const("a.w", Group::Adapter, &[2], 1.0).unwrap();
        let d0 = s.digest(|_| true);
        assert_eq!(d0, s.digest(|_| true));
        s.get_mut(id).tensor.data_mut()[1] = 1.0 + f32::EPSILON;
        assert_ne!(d0, s.digest(|_| true));
    }
}
