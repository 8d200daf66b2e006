//! Named parameter tensors with gradient slots, and their binding to a tape.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.rows(), value.cols());
        Self {
            value,
            grad,
            trainable: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), Param::new(value));
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.into()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.into()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Parameters in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Sets the trainable flag of every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Records every parameter on `tape`: trainable ones as leaves, frozen
    /// ones as constants (so they never receive a gradient).
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| {
                let v = if p.trainable {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Records every parameter as a constant regardless of its flag.
    pub fn bind_constants<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(name, p)| (name.clone(), tape.constant(p.value.clone())))
                .collect(),
        }
    }

    /// Adds the gradients of bound trainable parameters into their slots.
    pub fn accumulate(&mut self, bound: &Bound<'_, T>, grads: &Gradients<T>) {
        for (name, p) in self.params.iter_mut() {
            if !p.trainable {
                continue;
            }
            if let Some(g) = bound.vars.get(name).and_then(|v| grads.get(*v)) {
                p.grad.add_assign(g);
            }
        }
    }

    /// Euclidean norm over all gradient slots.
    pub fn grad_norm(&self) -> T {
        self.params
            .values()
            .map(|p| p.grad.sq_norm())
            .fold(T::zero(), |a, b| a + b)
            .sqrt()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            grad: p.grad.cast(),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Errors unless `other` holds exactly the same names and shapes.
    pub fn check_compatible(&self, other: &ParamStore<T>) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::Shape(format!(
                "{} parameters vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for ((a, pa), (b, pb)) in self.params.iter().zip(&other.params) {
            if a != b || pa.value.shape() != pb.value.shape() {
                return Err(Error::Shape(format!(
                    "parameter {a} {:?} vs {b} {:?}",
                    pa.value.shape(),
                    pb.value.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Tape handles for every parameter of a store.
pub struct Bound<'t, T> {
    vars: BTreeMap<String, Var<'t, T>>,
}

impl<'t, T: Scalar> Bound<'t, T> {
    /// Panics on unknown names: parameter names are fixed by the model layout.
    pub fn get(&self, name: &str) -> Var<'t, T> {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }

    pub fn try_get(&self, name: &str) -> Option<Var<'t, T>> {
        self.vars.get(name).copied()
    }
}

/// Normal(0, std) entries.
pub fn normal<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(rows, cols, |_, _| T::lit(dist.sample(rng)))
}

pub fn uniform<T: Scalar>(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    lo: f64,
    hi: f64,
) -> Tensor<T> {
    Tensor::from_fn(rows, cols, |_, _| T::lit(rng.gen_range(lo..hi)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_parameters_receive_no_gradient() {
        let mut store = ParamStore::<f64>::new();
        store.insert("a.w", Tensor::from_vec(1, 2, vec![1.0, 2.0]));
        store.insert("b.w", Tensor::from_vec(1, 2, vec![3.0, 4.0]));
        store.set_trainable("b.", false);
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let loss = (bound.get("a.w") * bound.get("b.w")).sum();
        let grads = tape.backward(loss).unwrap();
        store.accumulate(&bound, &grads);
        assert_eq!(store.get("a.w").unwrap().grad.data(), &[3.0, 4.0]);
        assert_eq!(store.get("b.w").unwrap().grad.data(), &[0.0, 0.0]);
    }
}
