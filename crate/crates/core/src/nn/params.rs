use std::collections::HashMap;
use std::ops::{Deref, DerefMut};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut impl Rng) -> ParamId {
        let dist = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        self.add(name, Tensor::from_parts(shape.to_vec(), data))
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::full(shape, 1.0))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
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

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Copies every parameter of `self` from the identically named parameter of `src`.
    pub fn copy_from(&mut self, src: &ParamStore) -> Result<()> {
        ema_update(self, src, 0.0)
    }
}

/// `θ̂ ← m·θ̂ + (1 − m)·θ` for every parameter of `momentum`, paired by name
/// with `online`. `m = 1` leaves `momentum` bitwise untouched.
pub fn ema_update(momentum: &mut ParamStore, online: &ParamStore, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::InvalidInput(format!("EMA coefficient {m} outside [0, 1]")));
    }
    let index: HashMap<&str, usize> = online.names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let mut pairs = Vec::with_capacity(momentum.len());
    for (i, name) in momentum.names.iter().enumerate() {
        let j = *index
            .get(name.as_str())
            .ok_or_else(|| Error::StructureMismatch(format!("no online parameter named {name}")))?;
        if momentum.tensors[i].shape() != online.tensors[j].shape() {
            return Err(Error::StructureMismatch(format!(
                "{name}: {:?} vs {:?}",
                momentum.tensors[i].shape(),
                online.tensors[j].shape()
            )));
        }
        pairs.push((i, j));
    }
    if m == 1.0 {
        return Ok(());
    }
    for (i, j) in pairs {
        let src = online.tensors[j].data();
        let dst = momentum.tensors[i].data_mut();
        if m == 0.0 {
            dst.copy_from_slice(src);
        } else {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = m * *d + (1.0 - m) * s;
            }
        }
    }
    Ok(())
}

/// A tape bound to a parameter store. Parameters become leaves on first use
/// when `trainable`, otherwise constants that can never receive gradient.
pub struct Graph<'s> {
    tape: Tape,
    store: &'s ParamStore,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore, trainable: bool) -> Self {
        Self { tape: Tape::new(), store, bound: vec![None; store.len()], trainable }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = if self.trainable { self.tape.leaf(value) } else { self.tape.constant(value) };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    /// Gradient per parameter, `None` for parameters the forward pass never touched.
    pub fn param_grads(&self) -> Vec<Option<Tensor>> {
        self.bound.iter().map(|b| b.and_then(|v| self.tape.grad_tensor(v))).collect()
    }

    pub fn into_tape(self) -> Tape {
        self.tape
    }
}

impl Deref for Graph<'_> {
    type Target = Tape;

    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Graph<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}
