//! Named parameter tensors with paired gradient buffers.
//!
//! Layers hold [`ParamId`] handles resolved at construction time. Forward
//! passes read a [`Params`]; backward passes accumulate into a matching
//! [`Gradients`]. [`ParamStore::split_mut`] hands out both at once.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const INIT_RANGE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    names: Vec<String>,
    index: HashMap<String, ParamId>,
    values: Vec<Tensor>,
}

impl Params {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    values: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(params: &Params) -> Self {
        Self {
            values: params.values.iter().map(|t| Tensor::zeros(t.dims())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn zero(&mut self) {
        self.values.iter_mut().for_each(|g| g.fill(0.0));
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.values {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn sum_squares(&self) -> f64 {
        self.values.iter().map(Tensor::sum_squares).sum()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.values
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }
}

/// A named, seeded collection of parameters and their gradients.
#[derive(Clone, Debug)]
pub struct ParamStore {
    params: Params,
    grads: Gradients,
    rng: ChaCha8Rng,
    seed: u64,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            params: Params::default(),
            grads: Gradients::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Registers a parameter initialized uniformly in (−0.1, 0.1).
    pub fn add(&mut self, name: impl Into<String>, dims: &[usize]) -> ParamId {
        let n: usize = dims.iter().product();
        let data = (0..n)
            .map(|_| self.rng.gen_range(-INIT_RANGE..INIT_RANGE))
            .collect();
        self.insert(name.into(), Tensor::from_vec(dims, data))
    }

    /// Registers a zero-initialized parameter (biases of gate-free layers).
    pub fn add_zeros(&mut self, name: impl Into<String>, dims: &[usize]) -> ParamId {
        self.insert(name.into(), Tensor::zeros(dims))
    }

    fn insert(&mut self, name: String, value: Tensor) -> ParamId {
        assert!(
            !self.params.index.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        let id = ParamId(self.params.values.len());
        self.grads.values.push(Tensor::zeros(value.dims()));
        self.params.index.insert(name.clone(), id);
        self.params.names.push(name);
        self.params.values.push(value);
        id
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn grads(&self) -> &Gradients {
        &self.grads
    }

    pub fn grads_mut(&mut self) -> &mut Gradients {
        &mut self.grads
    }

    pub fn split_mut(&mut self) -> (&Params, &mut Gradients) {
        (&self.params, &mut self.grads)
    }

    pub fn zero_grads(&mut self) {
        self.grads.zero();
    }

    /// Sets every parameter to zero.
    pub fn zero_params(&mut self) {
        self.params.values.iter_mut().for_each(|t| t.fill(0.0));
    }

    /// Replaces the value of `name`, keeping the registered shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .params
            .id(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        let slot = &mut self.params.values[id.0];
        if slot.dims() != value.dims() {
            return Err(Error::Config(format!(
                "parameter `{name}` has dims {:?}, got {:?}",
                slot.dims(),
                value.dims()
            )));
        }
        *slot = value;
        Ok(())
    }
}
