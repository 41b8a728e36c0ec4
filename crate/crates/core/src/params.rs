//! Named parameter storage and the JSON checkpoint format.

use std::collections::BTreeMap;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Learnable tensors addressed by stable dotted paths such as
/// `global.community3.lstm.W_input`. Insertion order is preserved.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tracked parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, mut tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name {name}")));
        }
        tensor.track();
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Overwrites values of `name` keeping the shape.
    pub fn set_values(&mut self, name: &str, values: &[f64]) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))?;
        let t = self.get_mut(id);
        if t.len() != values.len() {
            return Err(Error::shape("set_values", t.shape(), &[values.len()]));
        }
        t.values_mut().copy_from_slice(values);
        Ok(())
    }

    pub fn to_checkpoint(&self) -> serde_json::Value {
        let map: BTreeMap<&str, StoredTensor> = self
            .iter()
            .map(|(_, name, t)| {
                (
                    name,
                    StoredTensor {
                        shape: t.shape().to_vec(),
                        values: t.values().to_vec(),
                    },
                )
            })
            .collect();
        serde_json::to_value(map).expect("parameter map serializes")
    }

    /// Loads values into an already-shaped store; every name must be present
    /// with a matching shape, and no extra names are allowed.
    pub fn load_checkpoint(&mut self, value: &serde_json::Value) -> Result<()> {
        let map: BTreeMap<String, StoredTensor> = serde_json::from_value(value.clone())?;
        if map.len() != self.len() {
            return Err(Error::contract(format!(
                "checkpoint has {} parameters, model expects {}",
                map.len(),
                self.len()
            )));
        }
        for (name, stored) in map {
            let id = self
                .id(&name)
                .ok_or_else(|| Error::contract(format!("unexpected parameter {name}")))?;
            let t = self.get_mut(id);
            if t.shape() != stored.shape.as_slice() {
                return Err(Error::shape("load_checkpoint", t.shape(), &stored.shape));
            }
            t.values_mut().copy_from_slice(&stored.values);
        }
        Ok(())
    }
}
