//! Named trainable parameters, shared by the model, the optimizer and the
//! checkpoint format.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use alloc::string::String;
use alloc::vec::Vec;

/// Handle to one tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat registry of named parameter tensors.
///
/// Registration order is the canonical ordering used by the optimizer and
/// the checkpoint writer, so runs are reproducible byte for byte.
#[derive(Debug, Clone)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Registers a parameter under a unique dotted name.
    pub fn register(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        if self.names.iter().any(|n| n == name) {
            return Err(Error::Domain(alloc::format!(
                "parameter name {name:?} registered twice"
            )));
        }
        self.names.push(name.into());
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::Shape(alloc::format!(
                "parameter {:?} has shape {:?}, refusing {:?}",
                self.names[id.0],
                self.values[id.0].shape(),
                value.shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }

    /// Overwrites one coordinate (finite-difference probing).
    pub fn set_coord(&mut self, id: ParamId, coord: usize, value: T) -> Result<()> {
        if coord >= self.values[id.0].numel() {
            return Err(shape_err!(
                "coordinate {coord} out of range for parameter {:?}",
                self.names[id.0]
            ));
        }
        let mut data = self.values[id.0].as_slice().to_vec();
        data[coord] = value;
        self.values[id.0] = Tensor::from_parts(self.values[id.0].shape(), data);
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Looks a parameter up by its registered name.
    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar coordinates across all parameters.
    pub fn coord_count(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Converts every parameter into another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn register_get_set_roundtrip() {
        let mut store = ParamStore::<f64>::new();
        let id = store.register("w", Tensor::scalar(1.0)).unwrap();
        assert_eq!(store.get(id).item().unwrap(), 1.0);
        assert_eq!(store.name(id), "w");
        store.set(id, Tensor::scalar(0.5)).unwrap();
        assert_eq!(store.get(id).item().unwrap(), 0.5);
        assert!(store.register("w", Tensor::scalar(0.0)).is_err());
        assert_eq!(store.id_of("w"), Some(id));
        assert_eq!(store.id_of("missing"), None);
    }

    #[test]
    fn set_rejects_shape_changes() {
        let mut store = ParamStore::<f64>::new();
        let id = store.register("k", Tensor::zeros(&[2, 2])).unwrap();
        assert!(store.set(id, Tensor::zeros(&[4])).is_err());
    }
}
