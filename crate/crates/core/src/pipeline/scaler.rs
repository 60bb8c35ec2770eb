use serde::{Deserialize, Serialize};

use super::LabeledSeries;
use crate::error::{Error, Result};
use crate::synthgen::AnomalyType;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalerKind {
    MaxAbs,
    MinMax,
}

impl ScalerKind {
    /// Scaling used for a synthetic dataset of the given type.
    pub fn for_type(kind: AnomalyType) -> Self {
        match kind {
            AnomalyType::Trend => ScalerKind::MinMax,
            _ => ScalerKind::MaxAbs,
        }
    }
}

/// Per-feature affine scaling fitted on training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub kind: ScalerKind,
    /// `max|x|` for max-abs, `min` for min-max.
    pub a: Vec<f64>,
    /// Unused for max-abs, `max` for min-max.
    pub b: Vec<f64>,
    pub clip_to_unit: bool,
}

impl Scaler {
    pub fn fit(train: &LabeledSeries, kind: ScalerKind) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::data("cannot fit a scaler on an empty series"));
        }
        let dims = train.dims();
        let mut a = Vec::with_capacity(dims);
        let mut b = Vec::with_capacity(dims);
        for d in 0..dims {
            let x = train.dim(d);
            match kind {
                ScalerKind::MaxAbs => {
                    a.push(x.iter().fold(0.0f64, |m, v| m.max(v.abs())));
                    b.push(0.0);
                }
                ScalerKind::MinMax => {
                    a.push(x.iter().copied().fold(f64::INFINITY, f64::min));
                    b.push(x.iter().copied().fold(f64::NEG_INFINITY, f64::max));
                }
            }
        }
        Ok(Self {
            kind,
            a,
            b,
            clip_to_unit: kind == ScalerKind::MinMax,
        })
    }

    pub fn dims(&self) -> usize {
        self.a.len()
    }

    fn check(&self, series: &LabeledSeries) -> Result<()> {
        if series.dims() != self.dims() {
            return Err(Error::shape(format!(
                "scaler fitted on {} features, series has {}",
                self.dims(),
                series.dims()
            )));
        }
        Ok(())
    }

    pub fn transform_value(&self, d: usize, x: f64) -> f64 {
        match self.kind {
            ScalerKind::MaxAbs => {
                if self.a[d] > 0.0 {
                    x / self.a[d]
                } else {
                    0.0
                }
            }
            ScalerKind::MinMax => {
                let span = self.b[d] - self.a[d];
                if span <= 0.0 {
                    return 0.0;
                }
                let y = (x - self.a[d]) / span;
                if self.clip_to_unit {
                    y.clamp(0.0, 1.0)
                } else {
                    y
                }
            }
        }
    }

    pub fn inverse_value(&self, d: usize, y: f64) -> f64 {
        match self.kind {
            ScalerKind::MaxAbs => y * self.a[d],
            ScalerKind::MinMax => self.a[d] + y * (self.b[d] - self.a[d]),
        }
    }

    pub fn apply(&self, series: &LabeledSeries) -> Result<LabeledSeries> {
        self.check(series)?;
        let mut out = series.clone();
        for d in 0..series.dims() {
            for x in out.dim_mut(d) {
                *x = self.transform_value(d, *x);
            }
        }
        Ok(out)
    }

    pub fn inverse(&self, series: &LabeledSeries) -> Result<LabeledSeries> {
        self.check(series)?;
        let mut out = series.clone();
        for d in 0..series.dims() {
            for y in out.dim_mut(d) {
                *y = self.inverse_value(d, *y);
            }
        }
        Ok(out)
    }
}
