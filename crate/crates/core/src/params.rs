//! Named parameter tensors and their binding onto a tape.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Learnable tensors keyed by dotted name (`"block0.w_split"`), iterated in
/// lexicographic order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    /// Number of tensors.
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Number of learnable scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Registers every tensor as a leaf; `requires_grad` applies to all.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), requires_grad)))
            .collect();
        Bound { vars }
    }

    /// Bitwise equality of names, shapes and values.
    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, a), (kb, b))| ka == kb && a.bit_eq(b))
    }

    /// `(name, tensor)` pairs in iteration order.
    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        self.tensors
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }
}

/// Tape handles for one binding of a [`ParamStore`].
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter `{name}` is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Gradients of every bound parameter after `tape.backward`, zeros where
    /// the loss did not reach a parameter.
    pub fn grads(&self, tape: &Tape) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, &v) in &self.vars {
            let g = tape.grad(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v)));
            out.insert(name.clone(), g);
        }
        out
    }
}

/// Samples `U(-bound, bound)` entries.
pub fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
}

/// `U(±1/√fan_in)`, the default for affine maps.
pub fn fan_in_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    uniform(rng, shape, 1.0 / (fan_in.max(1) as f64).sqrt())
}

/// Joins a layer prefix and a parameter name.
pub(crate) fn key(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
