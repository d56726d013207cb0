//! Named parameter storage and tape binding.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// One named trainable tensor.
#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
}

/// All trainable tensors of a model, in a stable registration order that the
/// checkpoint format and optimizer state both rely on.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn register(&mut self, name: &str, tensor: Tensor) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name}")));
        }
        let idx = self.entries.len();
        self.entries.push(ParamEntry { name: name.to_string(), tensor: tensor.with_grad() });
        self.index.insert(name.to_string(), idx);
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn entry(&self, idx: usize) -> &ParamEntry {
        &self.entries[idx]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.entries[i].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.index_of(name)?;
        Some(&mut self.entries[i].tensor)
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.entries[idx].tensor
    }

    pub fn entries(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    /// Clears accumulated gradients on every entry.
    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.grad = None;
        }
    }

    /// Adds `grad` into the named entry's gradient accumulator.
    pub fn accumulate_grad(&mut self, idx: usize, grad: &[f64]) {
        let t = &mut self.entries[idx].tensor;
        match &mut t.grad {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(grad) {
                    *gi += ci;
                }
            }
            None => t.grad = Some(grad.to_vec()),
        }
    }
}

/// Lazily binds store entries onto a tape, so each parameter appears on a
/// given tape exactly once no matter how many sublayers reference it.
#[derive(Default)]
pub struct Bindings {
    bound: HashMap<usize, Var>,
}

impl Bindings {
    pub fn new() -> Self {
        Bindings::default()
    }

    /// Returns the tape variable for a named parameter, placing it on the
    /// tape on first use.
    pub fn var(&mut self, tape: &mut Tape, store: &ParamStore, name: &str) -> Result<Var> {
        let idx = store
            .index_of(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        if let Some(&v) = self.bound.get(&idx) {
            return Ok(v);
        }
        let v = tape.leaf(&store.entry(idx).tensor);
        self.bound.insert(idx, v);
        Ok(v)
    }

    /// Copies tape gradients back into the store after a backward pass.
    pub fn harvest_grads(&self, tape: &Tape, store: &mut ParamStore) {
        for (&idx, &var) in &self.bound {
            if let Some(g) = tape.grad(var) {
                store.accumulate_grad(idx, g);
            }
        }
    }
}
