use serde::{Deserialize, Serialize};

use super::LabeledSeries;
use crate::error::{Error, Result};
use crate::substrate::{Real, Tensor};

/// Non-overlapping `D×T` windows cut from offset 0.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSet {
    pub dims: usize,
    pub window: usize,
    /// One `D×T` block per window, feature-major (`[d * T + t]`).
    pub windows: Vec<Vec<f64>>,
    pub labels: Vec<Vec<bool>>,
    pub origins: Vec<usize>,
    /// Tail timesteps that did not fill a window.
    pub dropped: usize,
}

pub fn make_windows(series: &LabeledSeries, window: usize) -> Result<WindowSet> {
    if window == 0 {
        return Err(Error::config("window length must be >= 1"));
    }
    let len = series.len();
    if len < window {
        return Err(Error::data(format!(
            "series shorter than one window ({len} < {window})"
        )));
    }
    let count = len / window;
    let dims = series.dims();
    let mut windows = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    let mut origins = Vec::with_capacity(count);
    for w in 0..count {
        let o = w * window;
        let mut block = Vec::with_capacity(dims * window);
        for d in 0..dims {
            block.extend_from_slice(&series.dim(d)[o..o + window]);
        }
        windows.push(block);
        labels.push(series.labels[o..o + window].to_vec());
        origins.push(o);
    }
    Ok(WindowSet {
        dims,
        window,
        windows,
        labels,
        origins,
        dropped: len - count * window,
    })
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Number of timesteps covered by whole windows.
    pub fn covered(&self) -> usize {
        self.len() * self.window
    }

    /// Stack the selected windows into a `[B, D, T]` tensor.
    pub fn batch<R: Real>(&self, idx: &[usize]) -> Tensor<R> {
        let mut data = Vec::with_capacity(idx.len() * self.dims * self.window);
        for &i in idx {
            data.extend(self.windows[i].iter().map(|&v| R::lit(v)));
        }
        Tensor::new(&[idx.len(), self.dims, self.window], data).expect("window batch shape")
    }

    /// Concatenated labels of every window.
    pub fn flat_labels(&self) -> Vec<bool> {
        self.labels.iter().flatten().copied().collect()
    }

    /// The truncated series the windows were cut from.
    pub fn reassemble(&self) -> LabeledSeries {
        let l = self.covered();
        let mut values = vec![0.0; self.dims * l];
        for (w, block) in self.windows.iter().enumerate() {
            for d in 0..self.dims {
                let src = &block[d * self.window..(d + 1) * self.window];
                values[d * l + w * self.window..d * l + (w + 1) * self.window].copy_from_slice(src);
            }
        }
        LabeledSeries::new(self.dims, values, self.flat_labels()).expect("reassembled shape")
    }
}

/// Per-timestep anomaly scores aligned with labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSeries {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl ScoreSeries {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::shape(format!(
                "{} scores for {} labels",
                scores.len(),
                labels.len()
            )));
        }
        Ok(Self { scores, labels })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Join per-window scores in window order; every window must be scored with
/// exactly `T` values.
pub fn concat_scores(windows: &WindowSet, per_window: &[Vec<f64>]) -> Result<ScoreSeries> {
    if per_window.len() != windows.len() {
        return Err(Error::data(format!(
            "{} of {} windows scored",
            per_window.len(),
            windows.len()
        )));
    }
    let mut scores = Vec::with_capacity(windows.covered());
    for (i, s) in per_window.iter().enumerate() {
        if s.len() != windows.window {
            return Err(Error::shape(format!(
                "window {i} has {} scores, expected {}",
                s.len(),
                windows.window
            )));
        }
        scores.extend_from_slice(s);
    }
    ScoreSeries::new(scores, windows.flat_labels())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dims: usize, len: usize) -> LabeledSeries {
        let values = (0..dims * len).map(|i| i as f64).collect();
        let labels = (0..len).map(|t| t % 7 == 0).collect();
        LabeledSeries::new(dims, values, labels).unwrap()
    }

    #[test]
    fn window_counts_and_tail() {
        let w = make_windows(&ramp(2, 250), 100).unwrap();
        assert_eq!((w.len(), w.dropped), (2, 50));
        let w = make_windows(&ramp(2, 200), 100).unwrap();
        assert_eq!(w.origins, vec![0, 100]);
        assert_eq!(w.dropped, 0);
        assert!(make_windows(&ramp(1, 50), 100).is_err());
    }

    #[test]
    fn reassembly_recovers_truncated_series() {
        let s = ramp(3, 257);
        let w = make_windows(&s, 50).unwrap();
        assert_eq!(w.reassemble(), s.slice(0..250));
    }

    #[test]
    fn batch_layout_is_feature_major() {
        let s = ramp(2, 6);
        let w = make_windows(&s, 3).unwrap();
        let b = w.batch::<f64>(&[1]);
        assert_eq!(b.shape(), &[1, 2, 3]);
        assert_eq!(b.data(), &[3.0, 4.0, 5.0, 9.0, 10.0, 11.0]);
    }

    #[test]
    fn scores_concatenate_in_order() {
        let w = make_windows(&ramp(1, 6), 3).unwrap();
        let s = concat_scores(&w, &[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        assert_eq!(s.scores, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert!(concat_scores(&w, &[vec![1.0, 2.0, 3.0]]).is_err());
        assert!(concat_scores(&w, &[vec![1.0], vec![2.0]]).is_err());
    }

    #[test]
    fn scores_align_with_labels() {
        // marker windows: score equals the label so misalignment shows up
        let s = ramp(1, 30);
        let w = make_windows(&s, 7).unwrap();
        let per: Vec<Vec<f64>> = w
            .labels
            .iter()
            .map(|l| l.iter().map(|&b| b as u8 as f64).collect())
            .collect();
        let out = concat_scores(&w, &per).unwrap();
        for t in 0..out.len() {
            assert_eq!(out.scores[t] == 1.0, s.labels[t]);
        }
    }
}
