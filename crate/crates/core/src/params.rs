use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named parameter tensors kept in registration order.
///
/// Names are dotted paths such as `blocks.3.moe_s.experts.1.w1`; the order is
/// the canonical order used by checkpoints and the optimizer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, mut tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter `{name}`")));
        }
        tensor.set_requires_grad(true);
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in &mut self.entries {
            t.zero_grad();
        }
    }

    pub fn clear_grads(&mut self) {
        for (_, t) in &mut self.entries {
            t.clear_grad();
        }
    }
}

/// How a parameter is initialized when a model is built.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal with the given std, resampled outside two standard deviations.
    TruncatedNormal(f64),
    Zeros,
    Ones,
}

/// Name, shape and initializer of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn materialize(&self, rng: &mut crate::rng::Rng) -> Result<Tensor> {
        match self.init {
            Init::TruncatedNormal(std) => Tensor::from_fn(&self.shape, |_| rng.truncated_normal(std)),
            Init::Zeros => Tensor::zeros(&self.shape),
            Init::Ones => Tensor::full(&self.shape, 1.0),
        }
    }
}

/// Allocates and initializes `specs` in order, drawing from `rng`.
pub fn build_store(specs: &[ParamSpec], rng: &mut crate::rng::Rng) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for spec in specs {
        store.insert(spec.name.clone(), spec.materialize(rng)?)?;
    }
    Ok(store)
}
