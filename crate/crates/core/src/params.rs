//! Named parameter storage and graph binding.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::gradcheck::{self, GradCheckReport};
use crate::tensor::{Graph, Scalar, Tensor, Var};
use crate::{Error, Result};

/// Model parameters keyed by dotted path, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors.get_mut(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Registers every tensor as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self.tensors.iter().map(|(k, v)| (k.clone(), g.leaf(v.clone(), trainable))).collect();
        Bound { vars }
    }

    /// Names and tensors in iteration order.
    pub fn to_parts(&self) -> (Vec<String>, Vec<Tensor<T>>) {
        self.tensors.iter().map(|(k, v)| (k.clone(), v.clone())).unzip()
    }

    pub fn from_parts(names: Vec<String>, tensors: Vec<Tensor<T>>) -> Self {
        Self { tensors: names.into_iter().zip(tensors).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn from_vars(names: &[String], vars: &[Var]) -> Self {
        Self { vars: names.iter().cloned().zip(vars.iter().copied()).collect() }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Seeded parameter initializer.
pub struct Init<'a> {
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    pub fn normal<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(dist.sample(self.rng))).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches buffer")
    }

    /// Normal with standard deviation `1/sqrt(fan_in)`.
    pub fn fan_in<T: Scalar>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        self.normal(shape, 1.0 / (fan_in.max(1) as f64).sqrt())
    }

    /// Identity plus Gaussian noise.
    pub fn eye_noise<T: Scalar>(&mut self, n: usize, std: f64) -> Tensor<T> {
        let mut t: Tensor<T> = self.normal(&[n, n], std);
        for i in 0..n {
            t.data_mut()[i * n + i] += T::one();
        }
        t
    }

    pub fn uniform_index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }
}

/// Finite-difference check of `f` with respect to every tensor in `store`.
pub fn grad_check_store<T, F>(store: &ParamStore<T>, f: F, eps: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &Bound) -> Result<Var>,
{
    let (names, tensors) = store.to_parts();
    gradcheck::grad_check(|g: &mut Graph<T>, v: &[Var]| f(g, &Bound::from_vars(&names, v)), &tensors, eps)
}
