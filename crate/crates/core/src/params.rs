//! Named parameter and buffer storage.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named tensors.
///
/// Trainable parameters have `requires_grad` set; buffers (running
/// statistics, target standardization) do not and are never touched by the
/// optimizer.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<DenseTensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: &str, t: DenseTensor) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter name {name}");
        let id = ParamId(self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(t);
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn add_param(&mut self, name: &str, t: DenseTensor) -> ParamId {
        self.insert(name, t.with_grad())
    }

    pub fn add_buffer(&mut self, name: &str, mut t: DenseTensor) -> ParamId {
        t.requires_grad = false;
        self.insert(name, t)
    }

    pub fn get(&self, id: ParamId) -> &DenseTensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut DenseTensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
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

    pub fn trainable(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|id| self.tensors[id.0].requires_grad)
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.trainable().map(|id| self.get(id).numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            if t.requires_grad {
                t.zero_grad();
            }
        }
    }

    /// Overwrites values from another store holding the same names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for id in self.ids().collect::<Vec<_>>() {
            let name = self.names[id.0].clone();
            let src = other
                .lookup(&name)
                .ok_or_else(|| Error::Contract(format!("checkpoint lacks tensor {name}")))?;
            let src = other.get(src);
            let dst = &mut self.tensors[id.0];
            if src.shape() != dst.shape() {
                return Err(Error::Shape(format!(
                    "tensor {name}: checkpoint shape {:?}, model shape {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

/// He-normal initialization with standard deviation `sqrt(2 / fan_in)`.
pub fn he_normal<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> DenseTensor {
    normal(rng, shape, (2.0 / fan_in.max(1) as f64).sqrt())
}

pub fn normal<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> DenseTensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    DenseTensor::new(shape.to_vec(), data).expect("consistent shape")
}
