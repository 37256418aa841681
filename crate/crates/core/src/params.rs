//! Named parameter storage and the per-pass forward context that binds
//! stored tensors onto an autodiff graph.

use std::collections::HashMap;

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::ops::norm::{NormMode, RunningStats};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Part of the model but held fixed (Δ in strict mode).
    Frozen,
    /// Non-gradient state such as batch-norm running statistics.
    Buffer,
}

impl ParamKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamKind::Trainable => "trainable",
            ParamKind::Frozen => "frozen",
            ParamKind::Buffer => "buffer",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
}

/// Ordered, named tensors. Insertion order is the serialization order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
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
        Self {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(invalid("ParamStore::add", format!("duplicate parameter `{name}`")));
        }
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, value, kind });
        Ok(ParamId(self.entries.len() - 1))
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

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids()
            .filter(|&id| self.entries[id.0].kind == ParamKind::Trainable)
            .collect()
    }

    /// Number of scalars the optimizer updates.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Replace a value, keeping the registered shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(Error::ParamShape {
                name: e.name.clone(),
                expected: e.value.shape().to_vec(),
                found: value.shape().to_vec(),
            });
        }
        e.value = value;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    kind: e.kind,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Running statistics of one batch-norm layer, addressed inside a store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StatsIds {
    pub mean: ParamId,
    pub var: ParamId,
}

/// One forward pass: a fresh graph plus lazily bound parameters.
pub struct Forward<'s, T: Scalar> {
    pub graph: Graph<T>,
    store: &'s ParamStore<T>,
    bound: Vec<Option<Var>>,
    mode: NormMode,
    track_grad: bool,
    stat_updates: Vec<(StatsIds, Tensor<T>, Tensor<T>)>,
}

impl<'s, T: Scalar> Forward<'s, T> {
    /// Training pass: batch statistics, gradients for trainable parameters.
    pub fn train(store: &'s ParamStore<T>) -> Self {
        Self::with(store, NormMode::Train, true)
    }

    /// Inference pass: running statistics, no parameter gradients.
    pub fn eval(store: &'s ParamStore<T>) -> Self {
        Self::with(store, NormMode::Eval, false)
    }

    pub fn with(store: &'s ParamStore<T>, mode: NormMode, track_grad: bool) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            mode,
            track_grad,
            stat_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> NormMode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Graph node for a stored parameter (bound once per pass).
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let e = self.store.entry(id);
        let requires = self.track_grad && e.kind == ParamKind::Trainable;
        let v = self.graph.leaf(e.value.clone(), requires);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn running_stats(&self, ids: StatsIds) -> RunningStats<T> {
        RunningStats {
            mean: self.store.get(ids.mean).clone(),
            var: self.store.get(ids.var).clone(),
        }
    }

    pub fn record_stats(&mut self, ids: StatsIds, mean: Tensor<T>, var_unbiased: Tensor<T>) {
        self.stat_updates.push((ids, mean, var_unbiased));
    }

    /// Gradients of every bound trainable parameter after `graph.backward`.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor<T>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                let g = self.graph.grad(v)?;
                Some((ParamId(i), g.clone()))
            })
            .collect()
    }

    /// Pending running-stat updates, in recording order.
    pub fn take_stat_updates(&mut self) -> Vec<(StatsIds, Tensor<T>, Tensor<T>)> {
        std::mem::take(&mut self.stat_updates)
    }
}

/// Apply recorded batch statistics to a store's running buffers.
pub fn apply_stat_updates<T: Scalar>(
    store: &mut ParamStore<T>,
    updates: Vec<(StatsIds, Tensor<T>, Tensor<T>)>,
) {
    for (ids, mean, var) in updates {
        let mut rs = RunningStats {
            mean: store.get(ids.mean).clone(),
            var: store.get(ids.var).clone(),
        };
        rs.update(&mean, &var);
        *store.get_mut(ids.mean) = rs.mean;
        *store.get_mut(ids.var) = rs.var;
    }
}
