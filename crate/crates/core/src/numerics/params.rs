use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Named parameters with a trainable flag each. Names are kept sorted so
/// iteration order, and therefore every derived computation, is stable.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore<T> {
    params: BTreeMap<String, Param<T>>,
}

impl<T: Real> ParameterStore<T> {
    pub fn new() -> Self {
        ParameterStore {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, Param { value, trainable });
        Ok(())
    }

    /// Replaces or adds a parameter, keeping its trainable flag if present.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        match self.params.get_mut(name) {
            Some(p) => {
                if p.value.shape() != value.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "set parameter",
                        lhs: p.value.shape().to_vec(),
                        rhs: value.shape().to_vec(),
                    });
                }
                p.value = value;
            }
            None => {
                self.params.insert(name.to_string(), Param { value, trainable: false });
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub(crate) fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.params.get(name).is_some_and(|p| p.trainable)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn freeze_all(&mut self) {
        self.params.values_mut().for_each(|p| p.trainable = false);
    }

    /// Sets the trainable flag of every parameter whose name starts with `prefix`.
    /// Returns how many parameters matched.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut hits = 0;
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.trainable = trainable;
                hits += 1;
            }
        }
        hits
    }

    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        ParameterStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Names whose stored bits differ between `self` and `other` (or that
    /// exist in only one of them).
    pub fn changed_names(&self, other: &Self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, p) in &self.params {
            match other.params.get(name) {
                Some(q) if p.value.bit_eq(&q.value) => {}
                _ => out.push(name.clone()),
            }
        }
        for name in other.params.keys() {
            if !self.params.contains_key(name) {
                out.push(name.clone());
            }
        }
        out
    }

    /// Adds a parameter drawn from `N(0, std²)`.
    pub fn init_normal(&mut self, rng: &mut impl Rng, name: &str, shape: &[usize], std: f64) -> Result<()> {
        let t = Tensor::from_fn(shape, |_| T::lit(std * rng.sample::<f64, _>(StandardNormal)));
        self.insert(name, t, true)
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        self.insert(name, Tensor::full(shape, T::lit(value)), true)
    }

    /// Weight `[fan_in, fan_out]` with std `1/√fan_in`, plus a zero bias.
    pub fn init_linear(&mut self, rng: &mut impl Rng, prefix: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        self.init_normal(rng, &format!("{prefix}.w"), &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())?;
        self.init_const(&format!("{prefix}.b"), &[fan_out], 0.0)
    }

    pub fn init_layer_norm(&mut self, prefix: &str, dim: usize) -> Result<()> {
        self.init_const(&format!("{prefix}.g"), &[dim], 1.0)?;
        self.init_const(&format!("{prefix}.b"), &[dim], 0.0)
    }

    pub fn init_conv(&mut self, rng: &mut impl Rng, prefix: &str, kernel: usize, cin: usize, cout: usize) -> Result<()> {
        self.init_linear(rng, prefix, kernel * kernel * cin, cout)
    }

    /// Merges another store in, failing on name collisions.
    pub fn extend(&mut self, other: ParameterStore<T>) -> Result<()> {
        for (name, p) in other.params {
            self.insert(name, p.value, p.trainable)?;
        }
        Ok(())
    }
}
