//! Synthetic multivariate series with injected anomalies.
//!
//! Every dimension is a periodic sum of harmonics plus Gaussian noise. One
//! base series is drawn per seed and cut into train/validation/test splits;
//! anomalies are then injected into each split from its own random stream, so
//! changing the anomaly ratio never changes the base signal.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::LabeledSeries;
use crate::rng::{self, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnomalyType {
    Global,
    Contextual,
    Seasonal,
    Shapelet,
    Trend,
    Multi,
}

impl AnomalyType {
    pub const SINGLE: [AnomalyType; 5] = [
        AnomalyType::Global,
        AnomalyType::Contextual,
        AnomalyType::Seasonal,
        AnomalyType::Shapelet,
        AnomalyType::Trend,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AnomalyType::Global => "global",
            AnomalyType::Contextual => "contextual",
            AnomalyType::Seasonal => "seasonal",
            AnomalyType::Shapelet => "shapelet",
            AnomalyType::Trend => "trend",
            AnomalyType::Multi => "multi",
        }
    }

    /// Default anomaly ratio for the type (per dimension for `Multi`).
    pub fn default_ratio(self) -> f64 {
        match self {
            AnomalyType::Trend => 0.05,
            AnomalyType::Multi => 0.0125,
            _ => 0.06,
        }
    }

    pub fn is_point(self) -> bool {
        matches!(self, AnomalyType::Global | AnomalyType::Contextual)
    }
}

impl fmt::Display for AnomalyType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AnomalyType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "global" => Ok(AnomalyType::Global),
            "contextual" => Ok(AnomalyType::Contextual),
            "seasonal" => Ok(AnomalyType::Seasonal),
            "shapelet" => Ok(AnomalyType::Shapelet),
            "trend" => Ok(AnomalyType::Trend),
            "multi" => Ok(AnomalyType::Multi),
            other => Err(Error::config(format!("unknown anomaly type `{other}`"))),
        }
    }
}

/// Base-signal generator parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseParams {
    pub noise_sigma: f64,
    pub max_components: usize,
    /// Inclusive range of the fundamental period in timesteps.
    pub period_range: (usize, usize),
    pub amplitude_bound: f64,
}

impl Default for BaseParams {
    fn default() -> Self {
        Self {
            noise_sigma: 0.05,
            max_components: 3,
            period_range: (20, 50),
            amplitude_bound: 1.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub harmonic: usize,
    pub amplitude: f64,
    pub phase: f64,
}

/// Noiseless periodic signal of one dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimSignal {
    pub period: usize,
    pub components: Vec<Component>,
}

impl DimSignal {
    /// Value at (possibly fractional) absolute time `t`.
    pub fn eval(&self, t: f64) -> f64 {
        self.components
            .iter()
            .map(|c| c.amplitude * (TAU * c.harmonic as f64 * t / self.period as f64 + c.phase).sin())
            .sum()
    }

    /// Phase of the fundamental at time `t`, in cycles.
    pub fn cycles(&self, t: f64) -> f64 {
        let phase = self.components.first().map_or(0.0, |c| c.phase);
        t / self.period as f64 + phase / TAU
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaseSeries {
    pub signals: Vec<DimSignal>,
    pub series: LabeledSeries,
}

/// Draw `dims` periodic signals and sample them, with noise, at `0..len`.
pub fn generate_base(dims: usize, len: usize, seed: u64) -> Result<BaseSeries> {
    generate_base_with(dims, len, seed, &BaseParams::default())
}

pub fn generate_base_with(dims: usize, len: usize, seed: u64, p: &BaseParams) -> Result<BaseSeries> {
    if dims == 0 || len == 0 {
        return Err(Error::config("base series needs dims >= 1 and length >= 1"));
    }
    let (lo, hi) = p.period_range;
    if lo < 2 || hi < lo || p.max_components == 0 || p.noise_sigma < 0.0 {
        return Err(Error::config("invalid base-signal parameters"));
    }
    let mut shape_rng = rng::named(seed, "base-signal");
    let mut noise_rng = rng::named(seed, "base-noise");
    let noise = Normal::new(0.0, p.noise_sigma.max(f64::MIN_POSITIVE)).unwrap();
    let mut signals = Vec::with_capacity(dims);
    let mut values = Vec::with_capacity(dims * len);
    for _ in 0..dims {
        let period = shape_rng.random_range(lo..=hi);
        let count = shape_rng.random_range(1..=p.max_components);
        let mut harmonics: Vec<usize> = (2..=p.max_components + 1).collect();
        harmonics.shuffle(&mut shape_rng);
        let mut components = vec![Component {
            harmonic: 1,
            amplitude: shape_rng.random_range(0.6..1.0),
            phase: shape_rng.random_range(0.0..TAU),
        }];
        for &h in harmonics.iter().take(count - 1) {
            components.push(Component {
                harmonic: h,
                amplitude: shape_rng.random_range(0.1..0.3),
                phase: shape_rng.random_range(0.0..TAU),
            });
        }
        let total: f64 = components.iter().map(|c| c.amplitude).sum();
        let room = p.amplitude_bound - 3.0 * p.noise_sigma;
        if total > room {
            for c in &mut components {
                c.amplitude *= room / total;
            }
        }
        let signal = DimSignal { period, components };
        for t in 0..len {
            let eps = if p.noise_sigma > 0.0 { noise.sample(&mut noise_rng) } else { 0.0 };
            let v = signal.eval(t as f64) + eps;
            values.push(v.clamp(-p.amplitude_bound, p.amplitude_bound));
        }
        signals.push(signal);
    }
    Ok(BaseSeries {
        signals,
        series: LabeledSeries::new(dims, values, vec![false; len])?,
    })
}

/// Fixed injection magnitudes and shapes (recorded in dataset metadata).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InjectionParams {
    pub global_sigmas: f64,
    pub contextual_sigmas: f64,
    pub local_window: usize,
    pub segment_len: (usize, usize),
    pub frequency_factors: Vec<usize>,
    pub slope_range: (f64, f64),
    pub min_gap: usize,
}

impl Default for InjectionParams {
    fn default() -> Self {
        Self {
            global_sigmas: 5.0,
            contextual_sigmas: 2.5,
            local_window: 50,
            segment_len: (5, 20),
            frequency_factors: vec![2, 3],
            slope_range: (0.01, 0.05),
            min_gap: 10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Wave {
    Square,
    Sawtooth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Injection {
    Global { value: f64 },
    Contextual { value: f64, local_mean: f64, local_std: f64 },
    Seasonal { factor: usize },
    Shapelet { wave: Wave, amplitude: f64 },
    Trend { slope: f64 },
}

/// One injected point or segment, in split-local timestep indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InjectionEvent {
    pub dim: usize,
    pub start: usize,
    pub len: usize,
    #[serde(flatten)]
    pub detail: Injection,
}

/// Where a split sits inside the base series.
#[derive(Clone, Copy, Debug)]
pub struct SplitContext<'a> {
    pub signals: &'a [DimSignal],
    /// Absolute time of the split's first timestep.
    pub origin: usize,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Segment lengths summing to about `target` points.
fn draw_lengths(target: usize, kind: AnomalyType, p: &InjectionParams, rng: &mut Rng) -> Vec<usize> {
    if kind.is_point() {
        return vec![1; target];
    }
    let (lo, hi) = p.segment_len;
    let mut out = Vec::new();
    let mut left = target;
    while left >= lo {
        let len = rng.random_range(lo..=hi.min(left));
        out.push(len);
        left -= len;
    }
    out
}

/// Non-overlapping starts for `lengths` in `0..len` with at least `gap` free
/// steps between consecutive events.
fn place(lengths: &[usize], len: usize, gap: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if lengths.is_empty() {
        return Ok(Vec::new());
    }
    let used: usize = lengths.iter().sum::<usize>() + gap * (lengths.len() - 1);
    if used > len {
        return Err(Error::config(format!(
            "cannot place {} anomalies ({} points, gap {gap}) in {len} timesteps",
            lengths.len(),
            lengths.iter().sum::<usize>()
        )));
    }
    let free = len - used;
    let mut offsets: Vec<usize> = (0..lengths.len()).map(|_| rng.random_range(0..=free)).collect();
    offsets.sort_unstable();
    let mut starts = Vec::with_capacity(lengths.len());
    let mut used_before = 0;
    for (l, off) in lengths.iter().zip(offsets) {
        starts.push(off + used_before);
        used_before += l + gap;
    }
    Ok(starts)
}

/// Inject anomalies of `kind` into dimension `dim` covering about `ratio` of
/// the timesteps. Labels are OR-ed into the existing labels; other dimensions
/// are left bit-identical.
pub fn inject(
    series: &LabeledSeries,
    ctx: SplitContext<'_>,
    kind: AnomalyType,
    dim: usize,
    ratio: f64,
    params: &InjectionParams,
    rng: &mut Rng,
) -> Result<(LabeledSeries, Vec<InjectionEvent>)> {
    if kind == AnomalyType::Multi {
        return Err(Error::config("multi is a dataset layout, not a single injection kind"));
    }
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::config(format!("anomaly ratio {ratio} outside [0, 1)")));
    }
    if dim >= series.dims() || dim >= ctx.signals.len() {
        return Err(Error::config(format!("anomaly dimension {dim} out of range")));
    }
    let len = series.len();
    let target = (ratio * len as f64).round() as usize;
    let lengths = draw_lengths(target, kind, params, rng);
    let starts = place(&lengths, len, params.min_gap, rng)?;

    let mut out = series.clone();
    let clean: Vec<f64> = series.dim(dim).to_vec();
    let (mu, sigma) = mean_std(&clean);
    let lo = clean.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = clean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let signal = &ctx.signals[dim];
    let abs = |t: usize| (ctx.origin + t) as f64;
    let mut events = Vec::with_capacity(starts.len());

    for (&start, &seg) in starts.iter().zip(&lengths) {
        let detail = match kind {
            AnomalyType::Global => {
                let dir = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let value = mu + dir * sigma * (params.global_sigmas + rng.random_range(0.0..1.0));
                out.dim_mut(dim)[start] = value;
                Injection::Global { value }
            }
            AnomalyType::Contextual => {
                let half = params.local_window / 2;
                let a = start.saturating_sub(half);
                let b = (start + half).min(len);
                let (m, s) = mean_std(&clean[a..b]);
                let x = clean[start];
                let dir = if x > m {
                    -1.0
                } else if x < m {
                    1.0
                } else if rng.random_bool(0.5) {
                    1.0
                } else {
                    -1.0
                };
                let value = (m + dir * params.contextual_sigmas * s).clamp(lo, hi);
                out.dim_mut(dim)[start] = value;
                Injection::Contextual {
                    value,
                    local_mean: m,
                    local_std: s,
                }
            }
            AnomalyType::Seasonal => {
                let factor = *params
                    .frequency_factors
                    .get(rng.random_range(0..params.frequency_factors.len().max(1)))
                    .ok_or_else(|| Error::config("no frequency factors"))?;
                let t0 = abs(start);
                let d = out.dim_mut(dim);
                for t in start..start + seg {
                    let residual = clean[t] - signal.eval(abs(t));
                    d[t] = signal.eval(t0 + factor as f64 * (abs(t) - t0)) + residual;
                }
                Injection::Seasonal { factor }
            }
            AnomalyType::Shapelet => {
                let wave = if rng.random_bool(0.5) { Wave::Square } else { Wave::Sawtooth };
                let amplitude = (hi - lo) / 2.0;
                let d = out.dim_mut(dim);
                for t in start..start + seg {
                    let residual = clean[t] - signal.eval(abs(t));
                    let c = signal.cycles(abs(t));
                    let frac = c - c.floor();
                    let shape = match wave {
                        Wave::Square => {
                            if frac < 0.5 {
                                1.0
                            } else {
                                -1.0
                            }
                        }
                        Wave::Sawtooth => 2.0 * frac - 1.0,
                    };
                    d[t] = mu + amplitude * shape + residual;
                }
                Injection::Shapelet { wave, amplitude }
            }
            AnomalyType::Trend => {
                let (a, b) = params.slope_range;
                let mag = rng.random_range(a..=b);
                let slope = if rng.random_bool(0.5) { mag } else { -mag };
                let d = out.dim_mut(dim);
                for (i, t) in (start..start + seg).enumerate() {
                    d[t] += slope * (i + 1) as f64;
                }
                Injection::Trend { slope }
            }
            AnomalyType::Multi => unreachable!(),
        };
        for l in &mut out.labels[start..start + seg] {
            *l = true;
        }
        events.push(InjectionEvent {
            dim,
            start,
            len: seg,
            detail,
        });
    }
    Ok((out, events))
}

/// Dataset generation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub anomaly_type: AnomalyType,
    pub dims: usize,
    /// Train, validation and test lengths.
    pub splits: [usize; 3],
    /// Anomaly ratio of train and validation (per anomalous dimension for `Multi`).
    pub ratio: f64,
    /// Test-split ratio when it differs from `ratio`.
    pub test_ratio: Option<f64>,
    pub seed: u64,
    pub base: BaseParams,
    pub injection: InjectionParams,
}

impl SynthConfig {
    pub fn new(anomaly_type: AnomalyType, seed: u64) -> Self {
        Self {
            anomaly_type,
            dims: 5,
            splits: [20_000, 10_000, 20_000],
            ratio: anomaly_type.default_ratio(),
            test_ratio: None,
            seed,
            base: BaseParams::default(),
            injection: InjectionParams::default(),
        }
    }

    pub fn total_len(&self) -> usize {
        self.splits.iter().sum()
    }

    /// (dimension, kind) pairs that receive anomalies.
    pub fn anomalous_dims(&self) -> Vec<(usize, AnomalyType)> {
        match self.anomaly_type {
            AnomalyType::Multi => (0..4)
                .zip([
                    AnomalyType::Global,
                    AnomalyType::Contextual,
                    AnomalyType::Seasonal,
                    AnomalyType::Shapelet,
                ])
                .collect(),
            kind => vec![(self.dims - 1, kind)],
        }
    }

    fn validate(&self) -> Result<()> {
        if self.dims == 0 || self.splits.iter().any(|&l| l == 0) {
            return Err(Error::config("dims and every split length must be >= 1"));
        }
        if self.anomaly_type == AnomalyType::Multi && self.dims < 5 {
            return Err(Error::config("the multi-anomaly layout needs at least 5 dimensions"));
        }
        for r in [Some(self.ratio), self.test_ratio].into_iter().flatten() {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::config(format!("anomaly ratio {r} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMeta {
    pub name: String,
    pub origin: usize,
    pub len: usize,
    pub ratio: f64,
    pub achieved_ratio: f64,
    pub injections: Vec<InjectionEvent>,
}

/// Sidecar metadata: everything needed to regenerate and audit a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub config: SynthConfig,
    pub anomalous_dims: Vec<(usize, AnomalyType)>,
    pub signals: Vec<DimSignal>,
    pub splits: Vec<SplitMeta>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: LabeledSeries,
    pub val: LabeledSeries,
    pub test: LabeledSeries,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn splits(&self) -> [(&'static str, &LabeledSeries); 3] {
        [
            (SPLIT_NAMES[0], &self.train),
            (SPLIT_NAMES[1], &self.val),
            (SPLIT_NAMES[2], &self.test),
        ]
    }
}

pub fn generate_dataset(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let base = generate_base_with(config.dims, config.total_len(), config.seed, &config.base)?;
    let targets = config.anomalous_dims();
    let mut out = Vec::with_capacity(3);
    let mut metas = Vec::with_capacity(3);
    let mut origin = 0;
    for (i, (&len, name)) in config.splits.iter().zip(SPLIT_NAMES).enumerate() {
        let ratio = if i == 2 {
            config.test_ratio.unwrap_or(config.ratio)
        } else {
            config.ratio
        };
        let mut split = base.series.slice(origin..origin + len);
        let mut rng = rng::named(config.seed, &format!("inject-{name}"));
        let ctx = SplitContext {
            signals: &base.signals,
            origin,
        };
        let mut injections = Vec::new();
        for &(dim, kind) in &targets {
            let (next, events) = inject(&split, ctx, kind, dim, ratio, &config.injection, &mut rng)?;
            split = next;
            injections.extend(events);
        }
        metas.push(SplitMeta {
            name: name.to_string(),
            origin,
            len,
            ratio,
            achieved_ratio: split.anomaly_ratio(),
            injections,
        });
        out.push(split);
        origin += len;
    }
    let test = out.pop().unwrap();
    let val = out.pop().unwrap();
    let train = out.pop().unwrap();
    Ok(Dataset {
        train,
        val,
        test,
        meta: DatasetMeta {
            config: config.clone(),
            anomalous_dims: targets,
            signals: base.signals,
            splits: metas,
        },
    })
}

/// Four anomalous dimensions (global, contextual, seasonal, shapelet) at
/// `ratio_per_dim` each, the remaining dimensions clean.
pub fn generate_multianomaly(dims: usize, ratio_per_dim: f64, seed: u64) -> Result<Dataset> {
    let mut c = SynthConfig::new(AnomalyType::Multi, seed);
    c.dims = dims;
    c.ratio = ratio_per_dim;
    generate_dataset(&c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_display_round_trip() {
        for k in AnomalyType::SINGLE.into_iter().chain([AnomalyType::Multi]) {
            assert_eq!(k.name().parse::<AnomalyType>().unwrap(), k);
        }
        assert!("spike".parse::<AnomalyType>().is_err());
    }

    #[test]
    fn placement_respects_gap_and_bounds() {
        let mut r = rng::stream(1, 1);
        let lengths = vec![3, 5, 1, 7];
        let starts = place(&lengths, 60, 10, &mut r).unwrap();
        for i in 1..starts.len() {
            assert!(starts[i] >= starts[i - 1] + lengths[i - 1] + 10);
        }
        assert!(starts[3] + 7 <= 60);
        assert!(place(&[10, 10], 25, 10, &mut r).is_err());
    }

    #[test]
    fn zero_ratio_is_identity() {
        let base = generate_base(2, 300, 3).unwrap();
        let ctx = SplitContext {
            signals: &base.signals,
            origin: 0,
        };
        let p = InjectionParams::default();
        for kind in AnomalyType::SINGLE {
            let (s, ev) = inject(&base.series, ctx, kind, 1, 0.0, &p, &mut rng::stream(0, 0)).unwrap();
            assert_eq!(s, base.series);
            assert!(ev.is_empty());
        }
    }
}
