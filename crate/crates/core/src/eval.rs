//! Point-adjusted evaluation: PA%K, the F1-vs-K curve and its area, the
//! threshold grid and selection, per-K ROC curves, and Spearman correlation.
//!
//! `K` is an integer percentage in `0..=100`. A true segment is adjusted
//! (all of its points marked detected) when it has at least one hit and at
//! least `K`% of its points are hits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::ScoreSeries;

/// Number of thresholds in the evaluation grid.
pub const GRID_SIZE: usize = 50;
pub const K_MAX: u32 = 100;

/// Maximal run of anomalous labels, inclusive 0-based bounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

pub fn find_segments(labels: &[bool]) -> Vec<Segment> {
    let mut out = Vec::new();
    let mut start = None;
    for (t, &l) in labels.iter().enumerate() {
        match (l, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                out.push(Segment { start: s, end: t - 1 });
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(Segment {
            start: s,
            end: labels.len() - 1,
        });
    }
    out
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{a} predictions for {b} labels")));
    }
    Ok(())
}

fn adjusts(hits: usize, len: usize, k: u32) -> bool {
    hits >= 1 && 100 * hits >= k as usize * len
}

/// PA%K adjustment of binary predictions.
pub fn point_adjust(preds: &[bool], labels: &[bool], k: u32) -> Result<Vec<bool>> {
    check_len(preds.len(), labels.len())?;
    if k > K_MAX {
        return Err(Error::config(format!("K = {k} outside 0..=100")));
    }
    let mut out = preds.to_vec();
    for seg in find_segments(labels) {
        let hits = preds[seg.start..=seg.end].iter().filter(|&&p| p).count();
        if adjusts(hits, seg.len(), k) {
            out[seg.start..=seg.end].fill(true);
        }
    }
    Ok(out)
}

/// Confusion counts of the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn of(preds: &[bool], labels: &[bool]) -> Self {
        let mut c = Confusion::default();
        for (&p, &l) in preds.iter().zip(labels) {
            match (p, l) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn f1(&self) -> f64 {
        f1_from(self.tp, self.fp, self.fn_)
    }

    pub fn tpr(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn fpr(&self) -> f64 {
        ratio(self.fp, self.fp + self.tn)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn f1_from(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp == 0 {
        0.0
    } else {
        (2 * tp) as f64 / (2 * tp + fp + fn_) as f64
    }
}

/// F1 of the anomaly class; 0 when precision and recall are both 0.
pub fn f1(preds: &[bool], labels: &[bool]) -> Result<f64> {
    check_len(preds.len(), labels.len())?;
    Ok(Confusion::of(preds, labels).f1())
}

/// Sampled curve with its trapezoidal area.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricCurve {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub area: f64,
}

pub fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(a, b)| (a[1] - a[0]) * (b[0] + b[1]) / 2.0)
        .sum()
}

/// Hit count of every true segment under `preds`, plus false positives.
struct HitProfile {
    segs: Vec<(usize, usize)>,
    fp: usize,
    negatives: usize,
    positives: usize,
}

impl HitProfile {
    fn new(preds: impl Fn(usize) -> bool, labels: &[bool], segments: &[Segment]) -> Self {
        let segs = segments
            .iter()
            .map(|s| ((s.start..=s.end).filter(|&t| preds(t)).count(), s.len()))
            .collect();
        let mut fp = 0;
        let mut negatives = 0;
        for (t, &l) in labels.iter().enumerate() {
            if !l {
                negatives += 1;
                fp += preds(t) as usize;
            }
        }
        Self {
            segs,
            fp,
            negatives,
            positives: labels.len() - negatives,
        }
    }

    fn confusion(&self, k: u32) -> Confusion {
        let tp: usize = self
            .segs
            .iter()
            .map(|&(hits, len)| if adjusts(hits, len, k) { len } else { hits })
            .sum();
        Confusion {
            tp,
            fp: self.fp,
            fn_: self.positives - tp,
            tn: self.negatives - self.fp,
        }
    }
}

fn ks() -> impl Iterator<Item = u32> {
    0..=K_MAX
}

/// F1 after PA%K for `K = 0..=100` with predictions `score > delta`; area is
/// normalised to `[0, 1]`.
pub fn f1k_auc(scores: &[f64], labels: &[bool], delta: f64) -> Result<MetricCurve> {
    check_len(scores.len(), labels.len())?;
    let segments = find_segments(labels);
    let prof = HitProfile::new(|t| scores[t] > delta, labels, &segments);
    let x: Vec<f64> = ks().map(|k| k as f64).collect();
    let y: Vec<f64> = ks().map(|k| prof.confusion(k).f1()).collect();
    let area = trapezoid(&x, &y) / K_MAX as f64;
    Ok(MetricCurve { x, y, area })
}

/// `{k · s_max / 50 : k = 0..49}`.
pub fn threshold_grid(s_max: f64) -> Vec<f64> {
    (0..GRID_SIZE).map(|k| k as f64 * s_max / GRID_SIZE as f64).collect()
}

fn max_score(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::data("no scores"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("anomaly score is not finite".into()));
    }
    Ok(scores.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    pub delta: f64,
    pub index: usize,
    pub f1k_auc: f64,
    /// Area for every grid threshold, in grid order.
    pub scan: Vec<(f64, f64)>,
}

/// Grid threshold with the highest F1_K-AUC; ties go to the smaller threshold.
pub fn select_threshold(scores: &[f64], labels: &[bool]) -> Result<ThresholdChoice> {
    check_len(scores.len(), labels.len())?;
    let grid = threshold_grid(max_score(scores)?);
    let mut scan = Vec::with_capacity(grid.len());
    let mut best = 0;
    for (i, &d) in grid.iter().enumerate() {
        let a = f1k_auc(scores, labels, d)?.area;
        if a > scan.get(best).map_or(f64::NEG_INFINITY, |&(_, b)| b) {
            best = i;
        }
        scan.push((d, a));
    }
    Ok(ThresholdChoice {
        delta: scan[best].0,
        index: best,
        f1k_auc: scan[best].1,
        scan,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RocAggregation {
    /// Mean of the per-K areas.
    #[default]
    MeanOfAuc,
    /// Area under the upper envelope of all (threshold, K) operating points.
    PooledEnvelope,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocK {
    /// One ROC curve (x = FPR, y = TPR) per K.
    pub curves: Vec<MetricCurve>,
    pub auc: f64,
}

/// Threshold sweep used for the ROC curves: the grid over these scores plus
/// `+inf` (nothing flagged) and `-inf` (everything flagged).
pub fn roc_thresholds(scores: &[f64]) -> Result<Vec<f64>> {
    let mut t = threshold_grid(max_score(scores)?);
    t.push(f64::INFINITY);
    t.push(f64::NEG_INFINITY);
    Ok(t)
}

fn sort_points(points: &mut [(f64, f64)]) {
    points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
}

pub fn rock_auc(scores: &[f64], labels: &[bool]) -> Result<RocK> {
    rock_auc_with(scores, labels, RocAggregation::MeanOfAuc)
}

pub fn rock_auc_with(scores: &[f64], labels: &[bool], agg: RocAggregation) -> Result<RocK> {
    check_len(scores.len(), labels.len())?;
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::data("ROC needs both anomalous and normal timesteps"));
    }
    let segments = find_segments(labels);
    let profiles: Vec<HitProfile> = roc_thresholds(scores)?
        .into_iter()
        .map(|d| HitProfile::new(|t| scores[t] > d, labels, &segments))
        .collect();
    let mut curves = Vec::with_capacity(K_MAX as usize + 1);
    for k in ks() {
        let mut pts: Vec<(f64, f64)> = profiles
            .iter()
            .map(|p| {
                let c = p.confusion(k);
                (c.fpr(), c.tpr())
            })
            .collect();
        sort_points(&mut pts);
        let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
        let area = trapezoid(&x, &y);
        curves.push(MetricCurve { x, y, area });
    }
    let auc = match agg {
        RocAggregation::MeanOfAuc => curves.iter().map(|c| c.area).sum::<f64>() / curves.len() as f64,
        RocAggregation::PooledEnvelope => {
            let mut pts: Vec<(f64, f64)> = curves
                .iter()
                .flat_map(|c| c.x.iter().copied().zip(c.y.iter().copied()))
                .collect();
            sort_points(&mut pts);
            let mut top = f64::NEG_INFINITY;
            for p in &mut pts {
                top = top.max(p.1);
                p.1 = top;
            }
            let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
            trapezoid(&x, &y)
        }
    };
    Ok(RocK { curves, auc })
}

/// Average ranks (1-based) with ties sharing the mean rank.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_len(xs.len(), ys.len())?;
    if xs.len() < 2 {
        return Err(Error::data("Spearman correlation needs at least two pairs"));
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::data("Spearman correlation undefined for constant ranks"));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Validation-selected threshold applied to test scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub threshold: ThresholdChoice,
    pub f1k: MetricCurve,
    pub rock: RocK,
}

impl Evaluation {
    pub fn f1k_auc(&self) -> f64 {
        self.f1k.area
    }

    pub fn rock_auc(&self) -> f64 {
        self.rock.auc
    }
}

pub fn evaluate(val: &ScoreSeries, test: &ScoreSeries) -> Result<Evaluation> {
    let threshold = select_threshold(&val.scores, &val.labels)?;
    let f1k = f1k_auc(&test.scores, &test.labels, threshold.delta)?;
    let rock = rock_auc(&test.scores, &test.labels)?;
    Ok(Evaluation { threshold, f1k, rock })
}
