// SPDX-License-Identifier: Apache-2.0

use crate::error::TensorError;
use crate::graph::Gradients;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    /// Dotted path, unique within a store.
    pub name: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
    pub grad: Vec<T>,
}

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-limit, limit]` with `limit = sqrt(6 / (fan_in + fan_out))`.
    Xavier,
    Uniform(f64),
}

/// Owns every parameter of a model. Layers only hold [`ParamId`]s.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T = f32> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), index: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<T>) -> Result<ParamId, TensorError> {
        if self.index.contains_key(name) {
            return Err(TensorError::Invalid(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        let grad = vec![T::zero(); tensor.len()];
        self.params.push(Parameter { name: name.to_string(), tensor, trainable: true, grad });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    /// Registers a freshly initialized parameter. Fan-in/out for Xavier are the
    /// first and last dimensions.
    pub fn init(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Result<ParamId, TensorError> {
        let len: usize = shape.iter().product();
        let data: Vec<T> = match init {
            Init::Zeros => vec![T::zero(); len],
            Init::Ones => vec![T::one(); len],
            Init::Xavier => {
                let fan_in = shape.first().copied().unwrap_or(1);
                let fan_out = shape.last().copied().unwrap_or(1);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..len).map(|_| T::of(rng.gen_range(-limit..=limit))).collect()
            }
            Init::Uniform(limit) => (0..len).map(|_| T::of(rng.gen_range(-limit..=limit))).collect(),
        };
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Sets every parameter whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) -> usize {
        let mut hit = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.tensor.data_mut().iter_mut().for_each(|x| *x = T::zero());
            hit += 1;
        }
        hit
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Adds `scale * grad` from one backward pass into the stored gradients.
    pub fn accumulate(&mut self, grads: &Gradients<T>, scale: T) {
        for (id, g) in grads.params() {
            let p = &mut self.params[id.0];
            for (acc, &x) in p.grad.iter_mut().zip(g) {
                *acc = *acc + scale * x;
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|g| {
                let v = g.to_f64().unwrap_or(f64::NAN);
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Same parameters converted to another element type (gradients cleared).
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    trainable: p.trainable,
                    grad: vec![U::zero(); p.tensor.len()],
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}
