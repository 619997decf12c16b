//! Named parameter storage and per-tape binding.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named, learnable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        Ok(ParamId(self.tensors.len() - 1))
    }

    /// Xavier-uniform `[rows, cols]` weight.
    pub fn add_weight(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut Rng) -> Result<ParamId> {
        let scale = (6.0 / (rows + cols) as f64).sqrt();
        self.add(name, Tensor::uniform([rows, cols], scale, rng))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, len: usize) -> Result<ParamId> {
        self.add(name, Tensor::zeros([len]))
    }

    pub fn add_ones(&mut self, name: impl Into<String>, len: usize) -> Result<ParamId> {
        self.add(name, Tensor::full([len], 1.0))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Registers every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        Binding(self.tensors.iter().map(|t| tape.leaf(t.clone())).collect())
    }

    /// Registers every parameter as a constant (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Binding {
        Binding(self.tensors.iter().map(|t| tape.constant(t.clone())).collect())
    }

    /// Copies the gradients of the last backward pass into each tensor's
    /// `grad` buffer (zeros where a parameter was unreachable).
    pub fn collect_grads(&mut self, tape: &Tape, binding: &Binding) -> Result<()> {
        for (t, &v) in self.tensors.iter_mut().zip(&binding.0) {
            let g = tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]);
            t.set_grad(g)?;
        }
        Ok(())
    }

    /// Replaces values by name, requiring identical names and shapes.
    pub fn load(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        if named.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "incompatible checkpoint: {} tensors, model has {}",
                named.len(),
                self.tensors.len()
            )));
        }
        for (name, t) in named {
            let id = self
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("incompatible checkpoint: unknown tensor {name}")))?;
            let slot = &mut self.tensors[id.0];
            if slot.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "incompatible checkpoint: {name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.with_requires_grad(true);
        }
        Ok(())
    }
}

/// Tape handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Binding(Vec<Var>);

impl Binding {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}
