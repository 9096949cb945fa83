use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Named learnable tensors. Names are dotted paths such as `block0.w_q`;
/// iteration order is lexicographic, which fixes the order of every
/// reduction over parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors.get_mut(name).ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Glorot-uniform `[fan_in, fan_out]` matrix.
    pub fn init_xavier(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
        self.insert(name, Tensor::new(vec![fan_in, fan_out], data).expect("consistent shape"));
    }
}

/// Graph leaves for every entry of a [`ParamStore`].
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn bind(g: &mut Graph, store: &ParamStore) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (name, t) in store.iter() {
            vars.insert(name.clone(), g.param(t.clone())?);
        }
        Ok(Self { vars })
    }

    /// Bindings over leaves created elsewhere, paired with the store's names.
    pub fn from_vars(store: &ParamStore, vars: &[Var]) -> Result<Self> {
        if vars.len() != store.len() {
            return Err(Error::Dimension(format!("{} vars for {} parameters", vars.len(), store.len())));
        }
        Ok(Self { vars: store.iter().map(|(n, _)| n.clone()).zip(vars.iter().copied()).collect() })
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }

    /// Gradients after [`Graph::backward`], keyed like the store.
    pub fn grads(&self, g: &Graph) -> BTreeMap<String, Tensor> {
        self.vars.iter().map(|(n, &v)| (n.clone(), g.grad(v))).collect()
    }
}
