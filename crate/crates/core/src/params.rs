//! Named parameter storage shared by the networks, optimizer and checkpoint.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// One named tensor. Frozen entries (`trainable == false`) are never updated
/// by the optimizer but still persist in checkpoints.
#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Ordered name -> tensor table. Iteration order is creation order, which
/// fixes RNG draw order at init and the layout of checkpoints.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, value, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|i| &self.entries[*i].value)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))
    }

    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))?;
        let old = &self.entries[i].value;
        if old.shape() != value.shape() {
            return Err(Error::shape(
                "set_value",
                format!("{name}: stored {:?} vs new {:?}", old.shape(), value.shape()),
            ));
        }
        self.entries[i].value = value;
        Ok(())
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Names of trainable parameters matching a prefix predicate.
    pub fn trainable_names(&self, pred: impl Fn(&str) -> bool) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| e.trainable && pred(&e.name))
            .map(|e| e.name.clone())
            .collect()
    }

    /// Register a subset of parameters as graph leaves.
    ///
    /// `mode` maps each entry to `None` (skip) or `Some(requires_grad)`.
    pub fn bind_where(
        &self,
        g: &mut Graph,
        mode: impl Fn(&ParamEntry) -> Option<bool>,
    ) -> BoundParams {
        let mut vars = HashMap::new();
        for e in &self.entries {
            if let Some(req) = mode(e) {
                let var = g.leaf(&e.value.clone().with_grad(req));
                vars.insert(e.name.clone(), var);
            }
        }
        BoundParams { vars }
    }

    /// Register every parameter; gradients flow to trainable ones only when
    /// `train` is set.
    pub fn bind_all(&self, g: &mut Graph, train: bool) -> BoundParams {
        self.bind_where(g, |e| Some(e.trainable && train))
    }
}

/// Graph handles for one binding of a [`ParamStore`].
pub struct BoundParams {
    vars: HashMap<String, Var>,
}

impl BoundParams {
    /// Replace (or add) one binding, e.g. to route a probe leaf into a
    /// forward pass.
    pub fn insert(&mut self, name: impl Into<String>, var: Var) {
        self.vars.insert(name.into(), var);
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("parameter {name} not bound on this graph")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// (name, var) pairs, unordered.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}
