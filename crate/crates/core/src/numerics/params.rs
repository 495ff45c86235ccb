use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Whether decoupled weight decay applies (off for biases, norms, scalars).
    pub decay: bool,
}

/// Named parameter collection. Names are unique.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::InvalidValue(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, value, decay });
        Ok(id)
    }

    /// Dense weight `[out, in]` with uniform fan-in scaling.
    pub fn add_dense<R: Rng>(
        &mut self,
        name: impl Into<String>,
        out_dim: usize,
        in_dim: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let data = (0..out_dim * in_dim).map(|_| rng.random_range(-bound..bound)).collect();
        self.add(name, Tensor::matrix(out_dim, in_dim, data)?, true)
    }

    /// Embedding table `[rows, dim]` drawn from N(0, 0.02).
    pub fn add_embedding<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let data = (0..rows * dim).map(|_| normal.sample(rng)).collect();
        self.add(name, Tensor::matrix(rows, dim, data)?, true)
    }

    pub fn add_filled(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> Result<ParamId> {
        let n = shape.iter().product();
        self.add(name, Tensor::new(shape.to_vec(), vec![value; n])?, false)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Ids of every parameter whose name starts with `prefix`.
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.name.starts_with(prefix))
            .map(|(id, _)| id)
            .collect()
    }

    /// Combined checksum of the parameters under `prefix`, in name order.
    pub fn checksum_prefix(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0;
        for (name, id) in self.by_name.range(prefix.to_string()..) {
            if !name.starts_with(prefix) {
                break;
            }
            h = h.rotate_left(7) ^ self.get(*id).checksum();
        }
        h
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }
}

/// Per-parameter gradient buffers produced by a backward pass.
#[derive(Clone, Debug)]
pub struct Grads {
    slots: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn new(num_params: usize) -> Self {
        Self {
            slots: vec![None; num_params],
        }
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, len: usize, values: &[f64]) {
        let slot = self.slots[id.0].get_or_insert_with(|| vec![0.0; len]);
        for (s, v) in slot.iter_mut().zip(values) {
            *s += v;
        }
    }

    /// Gradient for `id`; parameters the loss never reached read as zeros.
    pub fn get(&self, store: &ParamStore, id: ParamId) -> Vec<f64> {
        match &self.slots[id.0] {
            Some(g) => g.clone(),
            None => vec![0.0; store.get(id).len()],
        }
    }

    pub fn raw(&self, id: ParamId) -> Option<&[f64]> {
        self.slots.get(id.0).and_then(|s| s.as_deref())
    }

    pub fn touched(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_some())
            .map(|(i, _)| ParamId(i))
    }

    /// Adds `other` into `self` slot by slot.
    pub fn merge(&mut self, other: &Grads) {
        for (i, slot) in other.slots.iter().enumerate() {
            if let Some(g) = slot {
                self.accumulate(ParamId(i), g.len(), g);
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.slots.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slots.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }
}
