//! Straight-line reference implementations of the point-adjusted metrics.
//!
//! Each (threshold, K) pair is evaluated from scratch: threshold the scores,
//! rescan the labels for segments, adjust, and count. Nothing is shared with
//! the library code beyond the arithmetic of the final ratios.

use diffad::rng::{self, Rng};
use rand::Rng as _;

pub fn adjust(preds: &[bool], labels: &[bool], k: u32) -> Vec<bool> {
    let mut out = preds.to_vec();
    let n = labels.len();
    let mut t = 0;
    while t < n {
        if !labels[t] {
            t += 1;
            continue;
        }
        let start = t;
        while t < n && labels[t] {
            t += 1;
        }
        let len = t - start;
        let hits = (start..t).filter(|&i| preds[i]).count();
        if hits > 0 && hits * 100 >= k as usize * len {
            for o in &mut out[start..t] {
                *o = true;
            }
        }
    }
    out
}

pub fn counts(preds: &[bool], labels: &[bool]) -> (usize, usize, usize, usize) {
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for i in 0..preds.len() {
        if preds[i] && labels[i] {
            tp += 1;
        } else if preds[i] {
            fp += 1;
        } else if labels[i] {
            fn_ += 1;
        } else {
            tn += 1;
        }
    }
    (tp, fp, fn_, tn)
}

pub fn f1(preds: &[bool], labels: &[bool]) -> f64 {
    let (tp, fp, fn_, _) = counts(preds, labels);
    if tp == 0 {
        0.0
    } else {
        (2 * tp) as f64 / (2 * tp + fp + fn_) as f64
    }
}

fn threshold(scores: &[f64], delta: f64) -> Vec<bool> {
    scores.iter().map(|&s| s > delta).collect()
}

fn trapezoid(pts: &[(f64, f64)]) -> f64 {
    let mut a = 0.0;
    for i in 1..pts.len() {
        a += (pts[i].0 - pts[i - 1].0) * (pts[i - 1].1 + pts[i].1) / 2.0;
    }
    a
}

pub fn f1_curve(scores: &[f64], labels: &[bool], delta: f64) -> Vec<f64> {
    let raw = threshold(scores, delta);
    (0..=100).map(|k| f1(&adjust(&raw, labels, k), labels)).collect()
}

pub fn f1k_area(scores: &[f64], labels: &[bool], delta: f64) -> f64 {
    let pts: Vec<(f64, f64)> = f1_curve(scores, labels, delta)
        .into_iter()
        .enumerate()
        .map(|(k, f)| (k as f64, f))
        .collect();
    trapezoid(&pts) / 100.0
}

pub fn grid(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (0..50).map(|k| k as f64 * m / 50.0).collect()
}

pub fn best_threshold(scores: &[f64], labels: &[bool]) -> (f64, f64) {
    let mut best = (0.0, f64::NEG_INFINITY);
    for d in grid(scores) {
        let a = f1k_area(scores, labels, d);
        if a > best.1 {
            best = (d, a);
        }
    }
    best
}

/// Per-K ROC areas and their mean.
pub fn rock(scores: &[f64], labels: &[bool]) -> (Vec<f64>, f64) {
    let mut deltas = grid(scores);
    deltas.push(f64::INFINITY);
    deltas.push(f64::NEG_INFINITY);
    let mut areas = Vec::new();
    for k in 0..=100 {
        let mut pts = Vec::new();
        for &d in &deltas {
            let adj = adjust(&threshold(scores, d), labels, k);
            let (tp, fp, fn_, tn) = counts(&adj, labels);
            pts.push((fp as f64 / (fp + tn) as f64, tp as f64 / (tp + fn_) as f64));
        }
        pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        areas.push(trapezoid(&pts));
    }
    let mean = areas.iter().sum::<f64>() / areas.len() as f64;
    (areas, mean)
}

/// Random labelled instance: length 1..=50, runs of anomalies, quantised
/// scores so that ties and zero scores are common.
pub fn instance(seed: u64) -> (Vec<f64>, Vec<bool>) {
    let mut r: Rng = rng::stream(seed, 77);
    let n = r.random_range(1..=50usize);
    let mut labels = vec![false; n];
    let mut t = 0;
    while t < n {
        if r.random_bool(0.25) {
            let len = r.random_range(1..=8usize).min(n - t);
            labels[t..t + len].fill(true);
            t += len;
        }
        t += r.random_range(1..=6usize);
    }
    let levels = r.random_range(2..=12u32);
    let scores = labels
        .iter()
        .map(|&l| {
            let bump = if l && r.random_bool(0.6) { 0.4 } else { 0.0 };
            ((r.random_range(0.0..1.0) + bump) * levels as f64).floor() / levels as f64
        })
        .collect();
    (scores, labels)
}
