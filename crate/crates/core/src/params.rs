//! Named parameter storage and its binding onto a [`Tape`].

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Grads, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Arc<Tensor<T>>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), Arc::new(value));
    }

    /// Gaussian init with std `gain / sqrt(fan_in)`.
    pub fn insert_init<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        gain: f64,
        rng: &mut R,
    ) {
        let std = gain / (fan_in.max(1) as f64).sqrt();
        self.insert(name, Tensor::randn(shape, std, rng));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .map(|a| a.as_ref())
            .ok_or_else(|| Error::Argument(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .map(Arc::make_mut)
            .ok_or_else(|| Error::Argument(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|t| t.all_finite())
    }

    pub fn bind<'t>(&'t self, tape: &'t Tape<T>) -> Bound<'t, T> {
        Bound {
            tape,
            store: self,
            vars: RefCell::new(BTreeMap::new()),
        }
    }
}

/// Parameters lazily registered as tape leaves.
pub struct Bound<'t, T: Scalar> {
    tape: &'t Tape<T>,
    store: &'t ParamStore<T>,
    vars: RefCell<BTreeMap<String, Var<'t, T>>>,
}

impl<'t, T: Scalar> Bound<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn var(&self, name: &str) -> Result<Var<'t, T>> {
        if let Some(v) = self.vars.borrow().get(name) {
            return Ok(*v);
        }
        let arc = self
            .store
            .params
            .get(name)
            .ok_or_else(|| Error::Argument(format!("unknown parameter {name}")))?
            .clone();
        let v = self.tape.leaf_arc(arc);
        self.vars.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients for every parameter touched by the forward pass.
    pub fn grads(&self, g: &Grads<T>) -> BTreeMap<String, Tensor<T>> {
        self.vars
            .borrow()
            .iter()
            .map(|(k, v)| (k.clone(), g.get_or_zeros(*v)))
            .collect()
    }
}
