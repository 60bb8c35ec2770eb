use std::collections::BTreeMap;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Adam moment accumulators for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<R> {
    pub m: Vec<R>,
    pub v: Vec<R>,
    pub step: u64,
}

/// Named model parameters with their optimizer state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet<R> {
    values: BTreeMap<String, Tensor<R>>,
    state: BTreeMap<String, AdamState<R>>,
}

impl<R: Real> ParameterSet<R> {
    pub fn new() -> Self {
        Self {
            values: BTreeMap::new(),
            state: BTreeMap::new(),
        }
    }

    /// Insert or replace a parameter, resetting its optimizer state.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<R>) {
        let name = name.into();
        let n = value.len();
        self.state.insert(
            name.clone(),
            AdamState {
                m: vec![R::zero(); n],
                v: vec![R::zero(); n],
                step: 0,
            },
        );
        self.values.insert(name, value.with_grad());
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<R>> {
        self.values.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<R>> {
        self.values.get_mut(name)
    }

    pub fn state(&self, name: &str) -> Option<&AdamState<R>> {
        self.state.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<R>)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.values.values().map(Tensor::len).sum()
    }

    /// Parameters whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParameterSet<R> {
        let mut out = ParameterSet::new();
        for (k, v) in &self.values {
            if k.starts_with(prefix) {
                out.values.insert(k.clone(), v.clone());
                out.state.insert(k.clone(), self.state[k].clone());
            }
        }
        out
    }

    /// Move all parameters of `other` into `self`. Names must be disjoint.
    pub fn merge(&mut self, other: ParameterSet<R>) -> Result<()> {
        for (k, v) in other.values {
            if self.values.contains_key(&k) {
                return Err(Error::config(format!("duplicate parameter `{k}`")));
            }
            let st = other.state[&k].clone();
            self.values.insert(k.clone(), v);
            self.state.insert(k, st);
        }
        Ok(())
    }

    pub(crate) fn state_mut(&mut self, name: &str) -> Option<(&mut Tensor<R>, &mut AdamState<R>)> {
        let v = self.values.get_mut(name)?;
        let s = self.state.get_mut(name)?;
        Some((v, s))
    }

    pub fn cast<S: Real>(&self) -> ParameterSet<S> {
        let mut out = ParameterSet::new();
        for (k, v) in &self.values {
            out.insert(k.clone(), v.cast());
        }
        out
    }
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Gradients<R>(BTreeMap<String, Tensor<R>>);

impl<R: Real> Gradients<R> {
    pub fn insert(&mut self, name: String, g: Tensor<R>) {
        self.0.insert(name, g);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<R>> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<R>)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Largest absolute gradient component among parameters with `prefix`.
    pub fn max_abs(&self, prefix: &str) -> f64 {
        self.0
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .flat_map(|(_, t)| t.data().iter().map(|x| x.as_f64().abs()))
            .fold(0.0, f64::max)
    }
}
