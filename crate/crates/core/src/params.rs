//! Named parameters with gradient and Adam state, stored in insertion order.

use std::collections::HashMap;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub adam_m: Tensor<T>,
    pub adam_v: Tensor<T>,
    pub step_count: u64,
}

impl<T: Real> Parameter<T> {
    fn new(name: String, value: Tensor<T>) -> Self {
        let zeros = Tensor::zeros(value.shape());
        Self {
            name,
            grad: zeros.clone(),
            adam_m: zeros.clone(),
            adam_v: zeros,
            value,
            step_count: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
    seed: u64,
}

/// 64-bit FNV-1a; selects the ChaCha stream for a parameter name.
fn name_stream(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Deterministic uniform draws in `[-bound, bound]` keyed by `(seed, name)`,
/// independent of the order in which parameters are created.
pub fn keyed_uniform<T: Real>(seed: u64, name: &str, shape: &[usize], bound: f64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(name_stream(name));
    let dist = Uniform::new_inclusive(-bound, bound);
    let count = shape.iter().product();
    let data = (0..count).map(|_| T::from_f64(dist.sample(&mut rng))).collect();
    Tensor::new(shape, data).expect("shape product matches")
}

impl<T: Real> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Parameter::new(name, value));
        Ok(ParamId(id))
    }

    /// Uniform in `[−1/√fan_in, 1/√fan_in]`.
    pub fn add_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let value = keyed_uniform(self.seed, name, shape, bound);
        self.insert(name, value)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count over all parameters.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn param(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].grad
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|id| self.param(id))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.id(name).map(|id| self.param_mut(id))
    }

    /// Adds `g` into the gradient accumulator of `id`.
    pub fn accumulate(&mut self, id: ParamId, g: &Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.grad.len() != g.len() {
            return Err(Error::Shape {
                op: "accumulate",
                left: p.grad.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        for (a, &b) in p.grad.data_mut().iter_mut().zip(g.data()) {
            *a += b;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::ZERO);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Copies every parameter value, in store order.
    pub fn snapshot(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, values: &[Tensor<T>]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Config(format!(
                "snapshot has {} tensors, store has {}",
                values.len(),
                self.params.len()
            )));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(Error::Shape {
                    op: "restore",
                    left: p.value.shape().to_vec(),
                    right: v.shape().to_vec(),
                });
            }
            p.value = v.clone();
        }
        Ok(())
    }

    pub fn global_grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.data())
            .map(|g| {
                let g = g.to_f64();
                g * g
            })
            .sum::<f64>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::<f32>::new(1);
        s.add_uniform("a", &[2, 2], 2).unwrap();
        assert!(s.add_uniform("a", &[2, 2], 2).is_err());
    }

    #[test]
    fn init_is_keyed_by_name_not_order() {
        let mut s1 = ParamStore::<f64>::new(7);
        s1.add_uniform("x", &[3, 4], 3).unwrap();
        s1.add_uniform("y", &[5], 3).unwrap();
        let mut s2 = ParamStore::<f64>::new(7);
        s2.add_uniform("y", &[5], 3).unwrap();
        s2.add_uniform("x", &[3, 4], 3).unwrap();
        assert_eq!(s1.get("x").unwrap().value, s2.get("x").unwrap().value);
        assert_eq!(s1.get("y").unwrap().value, s2.get("y").unwrap().value);
        assert_ne!(
            s1.get("x").unwrap().value.data()[..5],
            s1.get("y").unwrap().value.data()[..]
        );
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let mut s = ParamStore::<f64>::new(3);
        let id = s.add_uniform("w", &[64, 64], 16).unwrap();
        assert!(s.value(id).max_abs() <= 0.25);
        assert!(s.value(id).max_abs() > 0.2);
    }

    #[test]
    fn shapes_of_state_match_value() {
        let mut s = ParamStore::<f32>::new(0);
        let id = s.add_uniform("w", &[3, 2], 3).unwrap();
        let p = s.param(id);
        assert_eq!(p.grad.shape(), p.value.shape());
        assert_eq!(p.adam_m.shape(), p.value.shape());
        assert_eq!(p.adam_v.shape(), p.value.shape());
    }
}
