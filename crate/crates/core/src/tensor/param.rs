use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};

/// Handle to a [`Parameter`] inside a [`ParamStore`]. Two places in a model
/// that hold the same `ParamId` share one set of weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A named, trainable (or frozen) weight tensor.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    /// Weight decay applies (false for biases and layernorm parameters).
    pub decay: bool,
    grad: Option<Vec<f64>>,
    trainable: bool,
}

impl Parameter {
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }
}

/// Arena of parameters with unique names.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new trainable parameter. Names must be unique.
    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        data: Vec<f64>,
        decay: bool,
    ) -> Result<ParamId> {
        let name = name.into();
        let numel: usize = shape.iter().product();
        if shape.contains(&0) || numel != data.len() {
            return Err(Error::Shape(format!(
                "parameter {name}: shape {shape:?} does not hold {} values",
                data.len()
            )));
        }
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter id {name}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            shape,
            data,
            decay,
            grad: None,
            trainable: true,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    /// Mutable access to the data of a parameter. Grads and trainable flags
    /// are only changed through the dedicated methods.
    pub fn data_mut(&mut self, id: ParamId) -> &mut Vec<f64> {
        &mut self.params[id.0].data
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, _)| id)
            .collect()
    }

    /// Freezing a parameter drops its gradient buffer.
    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        let p = &mut self.params[id.0];
        p.trainable = trainable;
        if !trainable {
            p.grad = None;
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            if let Some(g) = p.grad.as_mut() {
                g.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    /// Adds `grads` into the gradient slots, allocating them on first use.
    /// Gradients never land on a frozen parameter.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (&id, g) in &grads.by_param {
            let p = &mut self.params[id.0];
            if !p.trainable {
                return Err(Error::Optimizer(format!(
                    "gradient produced for frozen parameter {}",
                    p.name
                )));
            }
            let slot = p.grad.get_or_insert_with(|| vec![0.0; g.len()]);
            slot.iter_mut().zip(g).for_each(|(s, x)| *s += x);
        }
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn trainable_scalars(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.numel())
            .sum()
    }

    /// Number of parameters currently holding a gradient buffer.
    pub fn allocated_grads(&self) -> usize {
        self.params.iter().filter(|p| p.grad.is_some()).count()
    }
}

/// Gradients produced by one backward pass, keyed by parameter.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub(crate) by_param: BTreeMap<ParamId, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.by_param.get(&id).map(|v| v.as_slice())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.by_param.keys().copied()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    /// Adds `grad` into the entry for `id`, creating it when absent.
    pub fn add(&mut self, id: ParamId, grad: &[f64]) {
        let slot = self.by_param.entry(id).or_insert_with(|| vec![0.0; grad.len()]);
        slot.iter_mut().zip(grad).for_each(|(s, g)| *s += g);
    }
}
