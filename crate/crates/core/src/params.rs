//! Named learnable tensors and their binding into a forward pass.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Gradients, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Ordered map of hierarchical names to tensors, each with a gradient slot.
/// Shapes are fixed at registration.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        let grad = Tensor::zeros(value.shape());
        self.entries.push(ParamEntry { name, value, grad });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.value(id))
    }

    /// Replaces a value, keeping the registered shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(Error::invalid(format!(
                "parameter `{}` has shape {:?}, got {:?}",
                e.name,
                e.value.shape(),
                value.shape()
            )));
        }
        e.value = value;
        Ok(())
    }

    pub fn set_by_name(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))?;
        self.set_value(id, value)
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].grad
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().fill(0.0);
        }
    }

    /// Adds gradients produced by a pass bound with [`Bindings::tracked`].
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (i, e) in self.entries.iter_mut().enumerate() {
            if let Some(g) = grads.get(i) {
                e.grad.add_assign(g);
            }
        }
    }

    pub(crate) fn split_mut(&mut self) -> impl Iterator<Item = (&mut Tensor, &Tensor)> {
        self.entries.iter_mut().map(|e| (&mut e.value, &e.grad))
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Parameter count per top-level name segment, in registration order.
    pub fn counts_by_module(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for e in &self.entries {
            let module = e.name.split('.').next().unwrap_or(&e.name).to_string();
            match out.iter_mut().find(|(m, _)| *m == module) {
                Some((_, n)) => *n += e.value.numel(),
                None => out.push((module, e.value.numel())),
            }
        }
        out
    }

    /// Bitwise equality of names, shapes and values.
    pub fn bit_equal(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a.value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Registers parameters under a scoped name prefix with seeded initialisers.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    scope: Vec<String>,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Init {
            store,
            rng,
            scope: Vec::new(),
        }
    }

    pub fn scoped<T>(&mut self, name: impl Into<String>, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        self.scope.push(name.into());
        let out = f(self);
        self.scope.pop();
        out
    }

    fn full_name(&self, name: &str) -> String {
        let mut parts = self.scope.clone();
        parts.push(name.to_string());
        parts.join(".")
    }

    pub fn tensor(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        let full = self.full_name(name);
        self.store.add(full, value)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.tensor(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.tensor(name, Tensor::full(shape, 1.0))
    }

    /// Normal(0, std) truncated to `[-2 std, 2 std]` by resampling.
    pub fn trunc_normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let normal = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        });
        self.tensor(name, t)
    }

    /// Uniform in `±1/sqrt(fan_in)`, the usual default for convolutions.
    pub fn kaiming_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound));
        self.tensor(name, t)
    }
}

/// Maps parameters of a store to graph leaves for one forward pass.
pub struct Bindings<'s> {
    store: &'s ParamStore,
    tracked: bool,
    vars: RefCell<Vec<Option<Var>>>,
}

impl<'s> Bindings<'s> {
    /// Parameters become gradient-tracked leaves keyed by their index.
    pub fn tracked(store: &'s ParamStore) -> Self {
        Self::new(store, true)
    }

    /// Parameters become constants; no graph is retained.
    pub fn inference(store: &'s ParamStore) -> Self {
        Self::new(store, false)
    }

    fn new(store: &'s ParamStore, tracked: bool) -> Self {
        Bindings {
            store,
            tracked,
            vars: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn get(&self, id: ParamId) -> Var {
        let mut vars = self.vars.borrow_mut();
        vars[id.0]
            .get_or_insert_with(|| {
                let v = self.store.value(id).clone();
                if self.tracked {
                    Var::leaf(v, id.0)
                } else {
                    Var::constant(v)
                }
            })
            .clone()
    }
}
