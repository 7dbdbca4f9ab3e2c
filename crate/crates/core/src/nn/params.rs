use std::collections::BTreeMap;

use rand::Rng;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named learnable tensor (or a non-trainable buffer) with its gradient.
#[derive(Clone, Debug)]
pub struct Param<T: Real> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

/// Owns every parameter and buffer of a model, addressed by [`ParamId`].
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real> {
    params: Vec<Param<T>>,
    by_name: BTreeMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    fn insert(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            grad: Tensor::zeros(value.shape()),
            value,
            trainable,
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        self.insert(name, value, true)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        self.insert(name, value, false)
    }

    /// Uniform fan-in initialisation, U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn add_fan_in<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.add(name, Tensor::uniform(shape, -bound, bound, rng))
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<T>)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn accumulate(&mut self, grads: &[(ParamId, &Tensor<T>)]) {
        for (id, g) in grads {
            let p = &mut self.params[id.0];
            if p.trainable {
                p.grad.add_assign(g);
            }
        }
    }

    pub fn apply_buffer_updates(&mut self, updates: Vec<(ParamId, Tensor<T>)>) {
        for (id, v) in updates {
            self.params[id.0].value = v;
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.grad.sq_norm())
            .sum::<f64>()
            .sqrt()
    }

    /// Scales all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm.is_finite() {
            let s = T::of(max_norm / (norm + 1e-6));
            for p in self.params.iter_mut().filter(|p| p.trainable) {
                p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
            }
        }
        norm
    }

    /// Copies values from `other` for every name present in both stores.
    /// Shapes must match exactly; returns the names copied.
    pub fn load_matching(&mut self, other: &ParamStore<T>) -> Result<Vec<String>> {
        let mut copied = Vec::new();
        let mut bad = Vec::new();
        for p in &other.params {
            if let Some(&id) = self.by_name.get(&p.name) {
                let dst = &mut self.params[id.0];
                if dst.value.shape() != p.value.shape() {
                    bad.push(format!(
                        "{}: expected {:?}, found {:?}",
                        p.name,
                        dst.value.shape(),
                        p.value.shape()
                    ));
                    continue;
                }
                dst.value = p.value.clone();
                copied.push(p.name.clone());
            }
        }
        if !bad.is_empty() {
            return Err(Error::Checkpoint(bad.join("; ")));
        }
        Ok(copied)
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Scalar-valued flat view of every trainable value, in id order.
    pub fn flat_trainable(&self) -> Vec<f64> {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .flat_map(|p| p.value.to_f64_vec())
            .collect()
    }
}
