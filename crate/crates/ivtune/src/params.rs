//! Named parameter storage with a trainable/frozen flag per tensor.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use std::collections::HashMap;

/// Index into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// A named tensor plus its optimization status.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Insertion-ordered parameter table. Iteration order is deterministic and
/// fixed at construction, which keeps checkpoints and optimizer updates
/// reproducible.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, tensor, trainable });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.by_name.get(name).map(|&i| &self.params[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        match self.by_name.get(name) {
            Some(&i) => Some(&mut self.params[i]),
            None => None,
        }
    }

    /// Parameters in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Force every parameter's flag (used by the full-fine-tuning and
    /// head-only training regimes).
    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }
}

/// Per-forward-pass binding of every parameter onto a tape, in store order.
/// Trainable parameters become gradient-requiring leaves.
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn bind(store: &ParamStore, tape: &mut Tape) -> Result<Self> {
        let mut vars = Vec::with_capacity(store.len());
        for p in store.iter() {
            vars.push(tape.leaf(p.tensor.clone(), p.trainable)?);
        }
        Ok(Binding { vars })
    }

    /// Bind against existing tape variables, one per parameter in store
    /// order. Lets a verification harness own the leaves.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Binding { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Convert node-keyed gradients into a name-keyed map covering exactly
    /// the trainable parameters the loss reached.
    pub fn named_gradients(
        &self,
        store: &ParamStore,
        mut grads: crate::tape::Gradients,
    ) -> HashMap<String, Tensor> {
        let mut out = HashMap::new();
        for (i, p) in store.iter().enumerate() {
            if let Some(g) = grads.take(self.vars[i]) {
                out.insert(p.name.clone(), g);
            }
        }
        out
    }
}

/// Split a store into (trainable, frozen) name lists; the two sets are
/// disjoint and exhaustive by construction.
pub fn partition(store: &ParamStore) -> (Vec<&Parameter>, Vec<&Parameter>) {
    store.iter().partition(|p| p.trainable)
}

/// Look up a parameter that must exist.
pub fn require<'a>(store: &'a ParamStore, name: &str) -> Result<&'a Parameter> {
    store
        .by_name(name)
        .ok_or_else(|| Error::UnknownParameter(name.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_keeps_insertion_order() {
        let mut s = ParamStore::new();
        s.insert("b.x", Tensor::zeros(vec![2]), true);
        s.insert("a.y", Tensor::zeros(vec![3]), false);
        let names: Vec<_> = s.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names, ["b.x", "a.y"]);
        assert_eq!(s.total_values(), 5);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_panic() {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::zeros(vec![1]), true);
        s.insert("p", Tensor::zeros(vec![1]), true);
    }

    #[test]
    fn partition_is_disjoint_and_exhaustive() {
        let mut s = ParamStore::new();
        s.insert("t1", Tensor::zeros(vec![1]), true);
        s.insert("f1", Tensor::zeros(vec![1]), false);
        s.insert("t2", Tensor::zeros(vec![1]), true);
        let (train, frozen) = partition(&s);
        assert_eq!(train.len() + frozen.len(), s.len());
        assert!(train.iter().all(|p| p.trainable));
        assert!(frozen.iter().all(|p| !p.trainable));
    }
}
