//! Named trainable parameters and their accumulated gradients.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU32, Ordering};

use crate::rng::{truncated_normal, StreamRng};
use crate::{Error, Result, Tensor};

static NEXT_STORE: AtomicU32 = AtomicU32::new(1);

/// Identifies a parameter across stores, so gradients from a graph that mixes
/// several models can be routed back to the right owner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    store: u32,
    index: u32,
}

impl ParamId {
    pub fn index(self) -> usize {
        self.index as usize
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

/// A clone keeps the original's id, so `ParamId`s held by a cloned model
/// stay valid for the copy.
#[derive(Clone, Debug)]
pub struct ParamStore {
    id: u32,
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            id: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let index = self.params.len();
        self.by_name.insert(name.clone(), index);
        let grad = Tensor::zeros_like(&value);
        self.params.push(Parameter {
            name,
            value,
            grad,
            trainable,
        });
        ParamId {
            store: self.id,
            index: index as u32,
        }
    }

    /// Weight matrix drawn from a ±2σ truncated normal with σ = 0.02.
    pub fn add_weight(&mut self, name: impl Into<String>, shape: &[usize], rng: &mut StreamRng) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| truncated_normal(rng, 0.02)).collect();
        let t = Tensor::new(shape.to_vec(), data).expect("shape");
        self.add(name, t, true)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape), true)
    }

    pub fn add_ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        let mut t = Tensor::zeros(shape);
        t.fill(1.0);
        self.add(name, t, true)
    }

    pub fn owns(&self, id: ParamId) -> bool {
        id.store == self.id
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        assert!(self.owns(id), "parameter id from another store");
        &self.params[id.index()]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        assert!(self.owns(id), "parameter id from another store");
        &mut self.params[id.index()]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.get(id).value
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId {
            store: self.id,
            index: i as u32,
        })
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(move |i| ParamId {
            store: self.id,
            index: i as u32,
        })
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values.
    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    /// Adds the gradients this store owns into each parameter's `grad`.
    pub fn accumulate(&mut self, grads: &crate::graph::Gradients) {
        for (id, g) in grads.iter() {
            if self.owns(*id) {
                self.params[id.index()].grad.add_assign(g);
            }
        }
    }

    /// Copies values from `other`, matching by name and shape.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameters, found {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for p in &mut self.params {
            let src = other
                .by_name
                .get(&p.name)
                .map(|&i| &other.params[i])
                .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {}", p.name)))?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::InvalidArgument(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    p.name,
                    src.value.shape(),
                    p.value.shape()
                )));
            }
            p.value = src.value.clone();
        }
        Ok(())
    }

    pub fn values_equal(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && bitwise_eq(&a.value, &b.value))
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }
}

pub fn bitwise_eq(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape()
        && a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}
