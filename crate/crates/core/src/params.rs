use indexmap::IndexMap;
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamError {
    #[error("parameter '{0}' registered twice")]
    Duplicate(String),
    #[error("no parameter named '{0}'")]
    Unknown(String),
}

/// Handle into a [`ParamStore`], stable for the store's lifetime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors, each paired with a gradient buffer of the same
/// shape. Iteration follows registration order.
///
/// Values and gradients live in separate vectors so a backward pass can read
/// one parameter while accumulating into another.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: IndexMap<String, ParamId>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId, ParamError> {
        let name = name.into();
        if self.names.contains_key(&name) {
            return Err(ParamError::Duplicate(name));
        }
        let id = ParamId(self.values.len());
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        self.names.insert(name, id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.names
            .get_index(id.0)
            .map(|(n, _)| n.as_str())
            .expect("ParamId from this store")
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| &self.values[id.0])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.id(name).map(|id| &mut self.values[id.0])
    }

    pub fn grad_of(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| &self.grads[id.0])
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    /// Replace the value of `name`, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<(), ParamError> {
        let id = self.id(name).ok_or_else(|| ParamError::Unknown(name.to_string()))?;
        assert_eq!(value.shape(), self.values[id.0].shape(), "shape of '{name}'");
        self.values[id.0] = value;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.keys().map(String::as_str)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, &Tensor)> {
        self.names
            .keys()
            .zip(&self.values)
            .zip(&self.grads)
            .map(|((n, v), g)| (n.as_str(), v, g))
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    /// Values for reading alongside gradients for accumulation.
    pub fn split_for_backward(&mut self) -> (&[Tensor], &mut [Tensor]) {
        (&self.values, &mut self.grads)
    }

    /// Values for updating alongside the gradients that drive the update.
    pub fn split_for_update(&mut self) -> (&mut [Tensor], &[Tensor]) {
        (&mut self.values, &self.grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registration_and_lookup() {
        let mut s = ParamStore::new();
        let a = s.register("a", Tensor::zeros(&[2, 3])).unwrap();
        let b = s.register("b", Tensor::zeros(&[4])).unwrap();
        assert_eq!(s.register("a", Tensor::zeros(&[1])), Err(ParamError::Duplicate("a".into())));
        assert_eq!(s.id("b"), Some(b));
        assert_eq!(s.name(a), "a");
        assert_eq!(s.grad(a).shape(), &[2, 3]);
        assert_eq!(s.scalar_count(), 10);
        assert_eq!(s.names().collect::<Vec<_>>(), vec!["a", "b"]);
    }

    #[test]
    fn zero_grads_clears_buffers() {
        let mut s = ParamStore::new();
        let a = s.register("a", Tensor::zeros(&[2])).unwrap();
        s.split_for_backward().1[a.index()].data_mut()[0] = 3.0;
        s.zero_grads();
        assert_eq!(s.grad(a).data(), &[0.0, 0.0]);
    }
}
