use std::collections::HashMap;
use std::hash::{Hash, Hasher};

use crate::error::{DiffError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A named trainable array and its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// Ordered set of uniquely named parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(DiffError::DuplicateParameter(name));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad: None });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| DiffError::UnknownParameter(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        self.params[id.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds a backward pass's parameter gradients into the stored grads.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (i, g) in grads.params.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = &mut self.params[i];
            match &mut p.grad {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g) {
                        *a += b;
                    }
                }
                None => {
                    p.grad = Some(Tensor::new(p.value.shape().to_vec(), g.clone()).unwrap());
                }
            }
        }
    }

    /// Order-sensitive hash of every name, shape and value bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for p in &self.params {
            p.name.hash(&mut h);
            p.value.shape().hash(&mut h);
            for v in p.value.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Gradients produced by one backward pass.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub(crate) params: Vec<Option<Vec<f64>>>,
    pub(crate) inputs: HashMap<usize, Vec<f64>>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient w.r.t. an input created with `Graph::input_with_grad`.
    pub fn input(&self, var: crate::graph::Var) -> Option<&[f64]> {
        self.inputs.get(&var.index()).map(|g| g.as_slice())
    }

    /// Adds another pass's parameter gradients; input gradients are dropped.
    pub fn merge(&mut self, other: &Gradients) {
        if self.params.len() < other.params.len() {
            self.params.resize(other.params.len(), None);
        }
        for (mine, theirs) in self.params.iter_mut().zip(&other.params) {
            let Some(t) = theirs else { continue };
            match mine {
                Some(m) => m.iter_mut().zip(t).for_each(|(a, b)| *a += b),
                None => *mine = Some(t.clone()),
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.params.iter_mut().flatten() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
}
