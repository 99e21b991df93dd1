use serde::{Deserialize, Serialize};

use super::graph::{Gradients, Graph};
use super::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor,
}

/// Named trainable tensors with one gradient buffer each.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<NamedTensor>,
    grads: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let [r, c] = value.shape();
        self.params.push(NamedTensor {
            name: name.into(),
            value,
        });
        self.grads.push(Tensor::zeros(r, c));
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(0.0));
    }

    /// Adds the adjoints of every parameter leaf in `graph` to the buffers.
    pub fn accumulate(&mut self, graph: &Graph, grads: &Gradients) {
        for &(var, id) in graph.param_leaves() {
            if let Some(adj) = grads.wrt(var) {
                self.grads[id.0].add_assign(adj);
            }
        }
    }

    pub fn named(&self) -> &[NamedTensor] {
        &self.params
    }

    pub fn from_named(params: Vec<NamedTensor>) -> Self {
        let grads = params
            .iter()
            .map(|p| Tensor::zeros(p.value.rows(), p.value.cols()))
            .collect();
        Self { params, grads }
    }

    /// Copies all values from `other`, which must have the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) {
        debug_assert_eq!(self.params.len(), other.params.len());
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            dst.value.clone_from(&src.value);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_resets_every_buffer() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::scalar(1.0));
        let b = s.add("b", Tensor::zeros(2, 2));
        s.grads[a.0].fill(3.0);
        s.grads[b.0].fill(-1.0);
        s.zero_grad();
        assert!(s
            .ids()
            .all(|id| s.grad(id).data().iter().all(|&g| g == 0.0)));
        assert_eq!(s.grad(b).shape(), [2, 2]);
    }
}
