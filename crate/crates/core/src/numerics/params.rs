use std::collections::HashMap;

use super::{NumericsError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A learnable tensor with its gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Flat, name-addressable parameter tree. Names are dotted paths such as
/// `enc.t1.stage2.entry.weight`; insertion order is stable and defines
/// checkpoint order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    entries: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId, NumericsError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(NumericsError::DuplicateParameter(name));
        }
        let id = ParamId(self.entries.len());
        let grad = Tensor::zeros(value.shape());
        self.by_name.insert(name.clone(), id);
        self.entries.push(Parameter { name, value, grad });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.entries[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.entries.iter_mut()
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.entries {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn accumulate(&mut self, grads: &ParamGrads) {
        for (p, g) in self.entries.iter_mut().zip(&grads.grads) {
            if let Some(g) = g {
                for (a, b) in p.grad.data_mut().iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for p in &mut self.entries {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= factor);
        }
    }
}

/// Gradients produced by one backward pass, indexed by [`ParamId`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGrads {
    pub(crate) grads: Vec<Option<Vec<f64>>>,
}

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub(crate) fn add(&mut self, id: ParamId, g: &[f64]) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        match &mut self.grads[id.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot => *slot = Some(g.to_vec()),
        }
    }

    /// Elementwise sum, used to reduce per-sample gradients in a fixed order.
    pub fn merge(&mut self, other: &ParamGrads) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.add(ParamId(i), g);
            }
        }
    }
}
