//! Named parameter storage shared by every layer of a model.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to one tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, uniquely named collection of trainable tensors. Registration
/// order is the checkpoint order.
#[derive(Clone, Default)]
pub struct ParamStore<T = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateTensor(name));
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(id))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    /// Replaces a tensor; the shape must not change.
    pub fn set(&mut self, id: ParamId, tensor: Tensor<T>) -> Result<()> {
        let old = &self.tensors[id.0];
        if old.shape() != tensor.shape() {
            return Err(Error::TensorMismatch {
                name: self.names[id.0].clone(),
                expected: format!("{:?}", old.shape()),
                found: format!("{:?}", tensor.shape()),
            });
        }
        self.tensors[id.0] = tensor;
        Ok(())
    }

    /// Adds `delta` to a single element.
    pub fn nudge(&mut self, id: ParamId, index: usize, delta: T) {
        let t = &self.tensors[id.0];
        let mut data = t.to_vec();
        data[index] = data[index] + delta;
        self.tensors[id.0] = Tensor::new(t.shape().to_vec(), data).expect("same shape");
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Number of trainable scalars.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for ParamStore<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("tensors", &self.len())
            .field("scalars", &self.numel())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::<f32>::new();
        s.add("a", Tensor::zeros([2])).unwrap();
        assert!(matches!(
            s.add("a", Tensor::zeros([2])),
            Err(Error::DuplicateTensor(_))
        ));
    }

    #[test]
    fn set_rejects_shape_change() {
        let mut s = ParamStore::<f32>::new();
        let id = s.add("w", Tensor::zeros([2, 2])).unwrap();
        assert!(s.set(id, Tensor::zeros([4])).is_err());
        s.nudge(id, 3, 1.5);
        assert_eq!(s.get(id).data()[3], 1.5);
        assert_eq!(s.numel(), 4);
    }
}
