use std::collections::HashMap;

use crate::autodiff::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// Frozen batch-norm buffers are stored but never optimised.
    pub trainable: bool,
}

/// Named tensors in registration order. Names are unique.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), by_name: HashMap::new() }
    }

    /// Registers a tensor. Panics on a duplicate name, which would be a
    /// wiring bug in the model builder.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) -> ParamId {
        let name = name.into();
        let id = self.entries.len();
        assert!(self.by_name.insert(name.clone(), id).is_none(), "duplicate parameter name {name}");
        self.entries.push(ParamEntry { name, tensor, trainable });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.id(name).map(|id| self.get_mut(id))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        (0..self.entries.len()).filter(|&i| self.entries[i].trainable).map(ParamId).collect()
    }

    /// Total scalar count, frozen buffers included.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn trainable_scalar_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.tensor.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry { name: e.name.clone(), tensor: e.tensor.cast(), trainable: e.trainable })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Replaces the value of `name`, keeping its dims.
    pub fn assign(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::invalid("name", format!("unknown parameter {name}")))?;
        if self.get(id).dims() != tensor.dims() {
            return Err(Error::ShapeMismatch(format!(
                "parameter {name} has dims {:?}, checkpoint has {:?}",
                self.get(id).dims(),
                tensor.dims()
            )));
        }
        *self.get_mut(id) = tensor;
        Ok(())
    }

    /// Puts every trainable tensor on the tape as a gradient-receiving leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound<'_, T> {
        let vars = self.entries.iter().map(|e| e.trainable.then(|| g.parameter(e.tensor.clone()))).collect();
        Bound { store: self, vars }
    }

    /// Like [`bind`](Self::bind) but with constant leaves, for inference.
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Bound<'_, T> {
        let vars = self.entries.iter().map(|e| e.trainable.then(|| g.constant(e.tensor.clone()))).collect();
        Bound { store: self, vars }
    }

    /// Binds trainable tensors to already-created graph nodes, given in
    /// [`trainable_ids`](Self::trainable_ids) order.
    pub fn bind_vars(&self, trainable: &[Var]) -> Bound<'_, T> {
        let mut it = trainable.iter().copied();
        let vars = self.entries.iter().map(|e| if e.trainable { it.next() } else { None }).collect();
        Bound { store: self, vars }
    }
}

/// A parameter store attached to one graph.
pub struct Bound<'a, T: Scalar> {
    store: &'a ParamStore<T>,
    vars: Vec<Option<Var>>,
}

impl<'a, T: Scalar> Bound<'a, T> {
    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    /// Graph node of a trainable tensor.
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0].unwrap_or_else(|| panic!("parameter {} is not on the graph", self.store.entries[id.0].name))
    }

    pub fn vars(&self) -> &[Option<Var>] {
        &self.vars
    }

    pub fn value(&self, id: ParamId) -> &'a [T] {
        self.store.get(id).data()
    }
}
