use std::collections::HashMap;

use crate::error::{shape_err, Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named learnable tensor with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamLeaf {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Every learnable tensor of a model, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    leaves: Vec<ParamLeaf>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        value.ensure_finite(&name)?;
        let id = ParamId(self.leaves.len());
        let (r, c) = value.shape();
        self.leaves.push(ParamLeaf {
            name: name.clone(),
            value,
            grad: Tensor::zeros(r, c),
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.leaves.iter().map(|l| l.value.len()).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn leaf(&self, id: ParamId) -> &ParamLeaf {
        &self.leaves[id.0]
    }

    pub fn leaf_mut(&mut self, id: ParamId) -> &mut ParamLeaf {
        &mut self.leaves[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.leaves[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.leaves[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.leaves[id.0].grad
    }

    pub fn leaves(&self) -> &[ParamLeaf] {
        &self.leaves
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.leaves.len()).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for leaf in &mut self.leaves {
            leaf.grad.fill(0.0);
        }
    }

    /// Adds `scale * grads` into the stored gradients.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) {
        for (id, g) in grads.iter() {
            self.leaves[id.0].grad.add_scaled(g, scale);
        }
    }

    pub fn scale_grads(&mut self, scale: f64) {
        for leaf in &mut self.leaves {
            leaf.grad.data_mut().iter_mut().for_each(|g| *g *= scale);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.leaves
            .iter()
            .flat_map(|l| l.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Replaces the value of an existing parameter, keeping its shape.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Data(format!("unknown parameter {name}")))?;
        let leaf = &mut self.leaves[id.0];
        if leaf.value.shape() != value.shape() {
            return Err(shape_err(format!(
                "parameter {name}: expected {:?}, got {:?}",
                leaf.value.shape(),
                value.shape()
            )));
        }
        value.ensure_finite(name)?;
        leaf.value = value;
        Ok(())
    }
}

/// Gradients produced by one backward pass, keyed by parameter.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    entries: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    pub(crate) fn push(&mut self, id: ParamId, grad: Tensor) {
        self.entries.push((id, grad));
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.entries.iter().find(|(i, _)| *i == id).map(|(_, g)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.entries.iter().map(|(i, g)| (*i, g))
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, g)| g.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(2, 2)).unwrap();
        assert!(store.add("w", Tensor::zeros(1, 1)).is_err());
        assert_eq!(store.grad(store.id("w").unwrap()).shape(), (2, 2));
    }
}
