//! Named parameter sets and their binding onto a [`Graph`].

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensorcore::{Graph, Tensor, Var};

/// Ordered name → tensor map. Iteration order (by name) is the canonical
/// order for checkpoints and optimizer state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    tensors: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Uniform `[-1/√fan_in, 1/√fan_in]` initialization.
    pub fn init_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut SeededRng) {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.insert(name, rng.uniform_tensor(shape, -bound, bound));
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f64) {
        self.insert(name, Tensor::full(shape, value));
    }

    /// Creates one trainable leaf per parameter.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), g.param(n, t.clone())))
                .collect(),
        }
    }

    /// Creates constant (non-trainable) leaves, for inference.
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), g.constant(t.clone())))
                .collect(),
        }
    }

    /// Like [`bind_frozen`](Self::bind_frozen) but only for names starting
    /// with one of `prefixes`.
    pub fn bind_frozen_prefixed(&self, g: &mut Graph, prefixes: &[&str]) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .filter(|(n, _)| prefixes.iter().any(|p| n.starts_with(p)))
                .map(|(n, t)| (n.clone(), g.constant(t.clone())))
                .collect(),
        }
    }

    /// Checks that `other` has the same names and shapes.
    pub fn check_same_layout(&self, other: &Params) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::Input(format!(
                "parameter sets differ in size: {} vs {}",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.tensors.iter().zip(&other.tensors) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(Error::Input(format!(
                    "parameter mismatch: {na} {:?} vs {nb} {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }
}

impl FromIterator<(String, Tensor)> for Params {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self {
            tensors: iter.into_iter().collect(),
        }
    }
}

/// Parameters bound to graph leaves for one forward pass.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    /// Copy with `name` bound to `var` instead.
    pub fn with(&self, name: &str, var: Var) -> Self {
        let mut vars = self.vars.clone();
        vars.insert(name.to_string(), var);
        Self { vars }
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}
