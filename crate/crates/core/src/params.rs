//! Named parameter storage shared between graphs, optimizers and checkpoints.

use std::collections::HashMap;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

#[derive(Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Arc<Tensor>>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> usize {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let idx = self.names.len();
        self.names.push(name.to_string());
        self.tensors.push(Arc::new(t));
        self.by_name.insert(name.to_string(), idx);
        idx
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> usize {
        *self
            .by_name
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn tensor(&self, idx: usize) -> &Arc<Tensor> {
        &self.tensors[idx]
    }

    pub fn get(&self, name: &str) -> &Arc<Tensor> {
        &self.tensors[self.index_of(name)]
    }

    /// Mutable access for optimizer updates. Panics if a graph still holds
    /// the tensor (graphs must be dropped before stepping).
    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor {
        Arc::get_mut(&mut self.tensors[idx])
            .expect("parameter still referenced by a live graph during update")
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> {
        0..self.names.len()
    }

    pub fn indices_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = usize> + 'a {
        self.names
            .iter()
            .enumerate()
            .filter(move |(_, n)| n.starts_with(prefix))
            .map(|(i, _)| i)
    }

    /// SHA-256 over the raw little-endian bytes of every parameter whose name
    /// starts with `prefix`, taken in name order so the digest is independent
    /// of registration order. Used to verify freeze contracts byte-exactly.
    pub fn hash_prefix(&self, prefix: &str) -> String {
        let mut idxs: Vec<usize> = self.indices_with_prefix(prefix).collect();
        idxs.sort_by(|&a, &b| self.names[a].cmp(&self.names[b]));
        let mut h = Sha256::new();
        for i in idxs {
            h.update(self.names[i].as_bytes());
            for v in self.tensors[i].data() {
                h.update(v.to_le_bytes());
            }
        }
        let out = h.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }
}

/// Per-graph binding of store parameters to graph leaves.
///
/// Frozen parameters are bound as non-tracked inputs, so no gradient buffers
/// are ever allocated for them and the optimizer cannot see them.
pub struct Binding {
    nodes: Vec<Option<NodeId>>,
    trainable: Vec<bool>,
}

impl Binding {
    pub fn new(store: &ParamStore, trainable: impl Fn(&str) -> bool) -> Self {
        let trainable = (0..store.len()).map(|i| trainable(store.name(i))).collect();
        Self {
            nodes: vec![None; store.len()],
            trainable,
        }
    }

    pub fn all_trainable(store: &ParamStore) -> Self {
        Self::new(store, |_| true)
    }

    pub fn all_frozen(store: &ParamStore) -> Self {
        Self::new(store, |_| false)
    }

    pub fn get(&mut self, g: &mut Graph, store: &ParamStore, name: &str) -> NodeId {
        let idx = store.index_of(name);
        if let Some(id) = self.nodes[idx] {
            return id;
        }
        let t = Arc::clone(store.tensor(idx));
        let id = if self.trainable[idx] {
            g.param(t)
        } else {
            g.input(t)
        };
        self.nodes[idx] = Some(id);
        id
    }

    /// Collect gradients of all bound trainable leaves into `acc`, keyed by
    /// store index. Missing entries are allocated lazily.
    pub fn collect_grads(&self, g: &Graph, store: &ParamStore, acc: &mut GradAccum) {
        for (idx, node) in self.nodes.iter().enumerate() {
            let (Some(node), true) = (node, self.trainable[idx]) else {
                continue;
            };
            if let Some(grad) = g.grad(*node) {
                acc.add(idx, store.tensor(idx).numel(), grad);
            }
        }
    }
}

/// Gradient accumulator across samples of a batch (and across workers).
#[derive(Default, Clone)]
pub struct GradAccum {
    grads: HashMap<usize, Vec<f32>>,
}

impl GradAccum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, idx: usize, numel: usize, delta: &[f32]) {
        let buf = self.grads.entry(idx).or_insert_with(|| vec![0.0; numel]);
        for (b, d) in buf.iter_mut().zip(delta) {
            *b += d;
        }
    }

    pub fn merge(&mut self, other: GradAccum) {
        for (idx, g) in other.grads {
            match self.grads.entry(idx) {
                std::collections::hash_map::Entry::Occupied(mut e) => {
                    for (b, d) in e.get_mut().iter_mut().zip(&g) {
                        *b += d;
                    }
                }
                std::collections::hash_map::Entry::Vacant(e) => {
                    e.insert(g);
                }
            }
        }
    }

    pub fn scale(&mut self, c: f32) {
        for g in self.grads.values_mut() {
            for v in g.iter_mut() {
                *v *= c;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Vec<f32>)> {
        self.grads.iter().map(|(&i, g)| (i, g))
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_changes_with_values() {
        let mut s = ParamStore::new();
        s.insert("a.w", Tensor::full(vec![2, 2], 1.0));
        s.insert("b.w", Tensor::full(vec![2], 0.5));
        let h0 = s.hash_prefix("a.");
        let h1 = s.hash_prefix("a.");
        assert_eq!(h0, h1);
        s.tensor_mut(0).data_mut()[0] = 2.0;
        assert_ne!(h0, s.hash_prefix("a."));
        // Prefixes are independent.
        assert_eq!(s.hash_prefix("b."), s.hash_prefix("b."));
    }

    #[test]
    fn frozen_binding_gets_no_grad() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::full(vec![2], 3.0));
        let mut g = Graph::new();
        let mut bind = Binding::all_frozen(&s);
        let w = bind.get(&mut g, &s, "w");
        let l = g.sum_all(w);
        // Loss is untracked: nothing trainable in the graph.
        assert_eq!(g.scalar_value(l), 6.0);
        let mut acc = GradAccum::new();
        bind.collect_grads(&g, &s, &mut acc);
        assert!(acc.is_empty());
    }
}
