use std::collections::HashMap;
use std::sync::Arc;

use crate::{Gradients, Tape, Tensor, Var};

/// Named trainable tensors, kept in insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
    index: HashMap<String, usize>,
}

/// Tape handles for every parameter of a store, in store order.
pub struct Bound {
    vars: Vec<Var>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter. Panics if the name is already taken.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.names.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(Arc::new(value));
        id
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|i| self.values[i].as_ref())
    }

    /// Looks up a parameter that must exist.
    pub fn expect(&self, name: &str) -> &Tensor {
        self.get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn by_id(&self, id: usize) -> &Tensor {
        &self.values[id]
    }

    pub fn shared(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.values[id])
    }

    /// Mutable access; copies the tensor only if a tape still shares it.
    pub fn by_id_mut(&mut self, id: usize) -> &mut Tensor {
        Arc::make_mut(&mut self.values[id])
    }

    pub fn set(&mut self, name: &str, value: Tensor) {
        let id = self
            .id(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        assert_eq!(
            self.values[id].shape(),
            value.shape(),
            "shape change for parameter {name}"
        );
        self.values[id] = Arc::new(value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter().map(|v| v.as_ref()))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    /// Records every parameter on the tape as a gradient-tracked leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .values
            .iter()
            .map(|v| tape.leaf(Arc::clone(v), true))
            .collect();
        Bound { vars }
    }

    /// Records every parameter as a constant (inference).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .values
            .iter()
            .map(|v| tape.leaf(Arc::clone(v), false))
            .collect();
        Bound { vars }
    }
}

impl Bound {
    pub fn var(&self, id: usize) -> Var {
        self.vars[id]
    }

    /// Gradients for each parameter in store order (`None` when unused).
    pub fn collect(&self, grads: &mut Gradients) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|&v| grads.take(v)).collect()
    }
}
