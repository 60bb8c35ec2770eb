use std::ops::Range;

use crate::error::{Error, Result};

/// `D×L` real values (row-major by feature) with one anomaly label per timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSeries {
    dims: usize,
    values: Vec<f64>,
    pub labels: Vec<bool>,
}

impl LabeledSeries {
    /// `values` is laid out feature-major: `values[d * L + t]`.
    pub fn new(dims: usize, values: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if dims == 0 {
            return Err(Error::data("series needs at least one feature"));
        }
        if labels.is_empty() {
            return Err(Error::data("series needs at least one timestep"));
        }
        if values.len() != dims * labels.len() {
            return Err(Error::shape(format!(
                "{} values do not form {dims} features × {} timesteps",
                values.len(),
                labels.len()
            )));
        }
        Ok(Self { dims, values, labels })
    }

    /// Unlabeled series (all labels false).
    pub fn unlabeled(dims: usize, values: Vec<f64>) -> Result<Self> {
        let len = if dims == 0 { 0 } else { values.len() / dims };
        Self::new(dims, values, vec![false; len])
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self, d: usize) -> &[f64] {
        let l = self.len();
        &self.values[d * l..(d + 1) * l]
    }

    pub fn dim_mut(&mut self, d: usize) -> &mut [f64] {
        let l = self.len();
        &mut self.values[d * l..(d + 1) * l]
    }

    pub fn at(&self, d: usize, t: usize) -> f64 {
        self.values[d * self.len() + t]
    }

    /// Feature vector at timestep `t`.
    pub fn row(&self, t: usize) -> Vec<f64> {
        (0..self.dims).map(|d| self.at(d, t)).collect()
    }

    pub fn slice(&self, range: Range<usize>) -> LabeledSeries {
        let values = (0..self.dims)
            .flat_map(|d| self.dim(d)[range.clone()].iter().copied())
            .collect();
        LabeledSeries {
            dims: self.dims,
            values,
            labels: self.labels[range].to_vec(),
        }
    }

    /// Fraction of anomalous timesteps.
    pub fn anomaly_ratio(&self) -> f64 {
        self.labels.iter().filter(|&&l| l).count() as f64 / self.len() as f64
    }
}
