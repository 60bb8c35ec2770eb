//! End-to-end runs: generate, scale, window, train, score, evaluate.
//!
//! A *cell* is one (model, dataset, seed) triple. Suites are fixed grids of
//! cells whose results are aggregated into mean ± std tables and a rank
//! correlation between the two headline metrics.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{f1k_auc, rock_auc, spearman, MetricCurve, RocK};
use crate::pipeline::{make_windows, Scaler, ScalerKind, ScoreSeries, WindowSet, DEFAULT_WINDOW};
use crate::synthgen::{generate_dataset, AnomalyType, Dataset, SynthConfig};
use crate::train::{train, Detector, ModelConfig, ModelKind, TrainConfig, TrainOutcome};

/// A synthetic dataset recipe; the seed comes from the cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub anomaly_type: AnomalyType,
    /// Train/validation anomaly ratio; the type's default when absent.
    pub ratio: Option<f64>,
    /// Test anomaly ratio; same as `ratio` when absent.
    pub test_ratio: Option<f64>,
}

impl DatasetSpec {
    pub fn new(anomaly_type: AnomalyType) -> Self {
        Self {
            anomaly_type,
            ratio: None,
            test_ratio: None,
        }
    }

    pub fn with_ratios(anomaly_type: AnomalyType, ratio: f64, test_ratio: f64) -> Self {
        Self {
            anomaly_type,
            ratio: Some(ratio),
            test_ratio: Some(test_ratio),
        }
    }

    /// Row label, e.g. `seasonal` or `seasonal_r10`.
    pub fn name(&self) -> String {
        match self.ratio {
            Some(r) => format!("{}_r{}", self.anomaly_type, fmt_pct(r)),
            None => self.anomaly_type.to_string(),
        }
    }

    pub fn synth_config(&self, seed: u64) -> SynthConfig {
        let mut c = SynthConfig::new(self.anomaly_type, seed);
        if let Some(r) = self.ratio {
            c.ratio = r;
        }
        c.test_ratio = self.test_ratio;
        c
    }
}

fn fmt_pct(r: f64) -> String {
    let p = r * 100.0;
    if (p - p.round()).abs() < 1e-9 {
        format!("{}", p.round() as i64)
    } else {
        format!("{p}")
    }
}

/// Everything a cell needs besides the model kind, dataset and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub window: usize,
    /// Architecture template; `kind` is overwritten per cell.
    pub model: ModelConfig,
    /// Training template; `seed` and `eval_seed` are overwritten per cell.
    pub train: TrainConfig,
    /// Epochs of the standalone autoencoder when they differ from `train.epochs`.
    #[serde(default)]
    pub ae_epochs: Option<usize>,
}

impl RunSettings {
    /// Full-size models and the 100-epoch budget.
    pub fn full() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            model: ModelConfig::new(ModelKind::Diffusion),
            train: TrainConfig::default(),
            ae_epochs: None,
        }
    }

    /// Reduced budget for a single CPU core: narrower U-Net, batch 8, three
    /// noise-level candidates, a long autoencoder warmup. The standalone
    /// autoencoder gets the same autoencoder epochs as the joint model.
    pub fn desk() -> Self {
        let mut model = ModelConfig::new(ModelKind::Diffusion);
        model.diffusion.unet.base_channels = 16;
        model.diffusion.candidates = vec![10, 20, 50];
        model.joint.warmup_epochs = 30;
        let epochs = 20;
        Self {
            window: DEFAULT_WINDOW,
            ae_epochs: Some(model.joint.warmup_epochs + epochs),
            model,
            train: TrainConfig {
                epochs,
                batch: 8,
                eval_every: 10,
                ..TrainConfig::default()
            },
        }
    }

    pub fn model_config(&self, kind: ModelKind) -> ModelConfig {
        ModelConfig {
            kind,
            ..self.model.clone()
        }
    }

    pub fn train_config(&self, kind: ModelKind, seed: u64) -> TrainConfig {
        let epochs = match (kind, self.ae_epochs) {
            (ModelKind::Ae, Some(e)) => e,
            _ => self.train.epochs,
        };
        TrainConfig {
            seed,
            eval_seed: seed,
            epochs,
            ..self.train.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub model: ModelKind,
    pub dataset: DatasetSpec,
    pub seed: u64,
}

/// One row of the results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub model: ModelKind,
    pub dataset: String,
    pub seed: u64,
    pub delta: f64,
    pub m: usize,
    pub f1k_auc: f64,
    pub rock_auc: f64,
}

/// Scaled, windowed splits of one dataset.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub dataset: Dataset,
    pub scaler: Scaler,
    pub train: WindowSet,
    pub val: WindowSet,
    pub test: WindowSet,
}

pub fn prepare(dataset: Dataset, window: usize) -> Result<Prepared> {
    let kind = ScalerKind::for_type(dataset.meta.config.anomaly_type);
    prepare_with(dataset, window, kind)
}

pub fn prepare_with(dataset: Dataset, window: usize, kind: ScalerKind) -> Result<Prepared> {
    let scaler = Scaler::fit(&dataset.train, kind)?;
    let w = |s| -> Result<WindowSet> { make_windows(&scaler.apply(s)?, window) };
    Ok(Prepared {
        train: w(&dataset.train)?,
        val: w(&dataset.val)?,
        test: w(&dataset.test)?,
        scaler,
        dataset,
    })
}

/// Full output of a cell run.
#[derive(Clone, Debug)]
pub struct CellRun {
    pub result: CellResult,
    pub outcome: TrainOutcome,
    pub test_scores: ScoreSeries,
    pub f1k: MetricCurve,
    pub rock: RocK,
    pub seconds: f64,
}

/// Build a detector of `kind` for these windows and train it.
pub fn train_prepared(
    train_windows: &WindowSet,
    val_windows: &WindowSet,
    settings: &RunSettings,
    kind: ModelKind,
    seed: u64,
) -> Result<(Detector, TrainOutcome)> {
    let det = Detector::build(&settings.model_config(kind), train_windows.dims, settings.window)?;
    let outcome = train(&det, train_windows, val_windows, &settings.train_config(kind, seed))?;
    Ok((det, outcome))
}

/// Train on the cell's data, then score the test split at the
/// validation-selected noise level and threshold.
pub fn run_cell(spec: &CellSpec, settings: &RunSettings) -> Result<CellRun> {
    let start = Instant::now();
    let data = generate_dataset(&spec.dataset.synth_config(spec.seed))?;
    let prep = prepare(data, settings.window)?;
    let (det, outcome) = train_prepared(&prep.train, &prep.val, settings, spec.model, spec.seed)?;
    let tc = settings.train_config(spec.model, spec.seed);
    let best = &outcome.best;
    let test_scores = det.score(&outcome.params, &prep.test, best.m, tc.eval_seed, tc.eval_batch)?;
    let f1k = f1k_auc(&test_scores.scores, &test_scores.labels, best.delta)?;
    let rock = rock_auc(&test_scores.scores, &test_scores.labels)?;
    let result = CellResult {
        model: spec.model,
        dataset: spec.dataset.name(),
        seed: spec.seed,
        delta: best.delta,
        m: best.m,
        f1k_auc: f1k.area,
        rock_auc: rock.auc,
    };
    Ok(CellRun {
        result,
        outcome,
        test_scores,
        f1k,
        rock,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    /// Train/validation ratio swept over 1..20 % on a fixed 5 % test split.
    RatioStudy,
    /// Four anomalous dimensions of different kinds.
    MultiAnomaly,
    /// The five single-type synthetic datasets.
    SingleType,
}

impl Suite {
    pub const RATIOS: [f64; 5] = [0.01, 0.05, 0.10, 0.15, 0.20];
    pub const RATIO_TEST: f64 = 0.05;

    pub fn name(self) -> &'static str {
        match self {
            Suite::RatioStudy => "ratio_study",
            Suite::MultiAnomaly => "multi_anomaly",
            Suite::SingleType => "table2_synthetic",
        }
    }

    pub fn datasets(self) -> Vec<DatasetSpec> {
        match self {
            Suite::RatioStudy => Self::RATIOS
                .iter()
                .map(|&r| DatasetSpec::with_ratios(AnomalyType::Seasonal, r, Self::RATIO_TEST))
                .collect(),
            Suite::MultiAnomaly => vec![DatasetSpec::new(AnomalyType::Multi)],
            Suite::SingleType => AnomalyType::SINGLE.iter().map(|&k| DatasetSpec::new(k)).collect(),
        }
    }

    /// All cells, ordered dataset, model, seed.
    pub fn cells(self, models: &[ModelKind], seeds: &[u64]) -> Vec<CellSpec> {
        let mut out = Vec::new();
        for d in self.datasets() {
            for &model in models {
                for &seed in seeds {
                    out.push(CellSpec {
                        model,
                        dataset: d.clone(),
                        seed,
                    });
                }
            }
        }
        out
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "ratio_study" => Ok(Suite::RatioStudy),
            "multi_anomaly" => Ok(Suite::MultiAnomaly),
            "table2_synthetic" | "synthetic" => Ok(Suite::SingleType),
            other => Err(Error::config(format!("unknown suite `{other}`"))),
        }
    }
}

pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub model: ModelKind,
    pub dataset: String,
    pub seed: u64,
    pub error: String,
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std, n })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: ModelKind,
    pub dataset: String,
    pub f1k_auc: Stat,
    pub rock_auc: Stat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub rows: Vec<CellResult>,
    pub failures: Vec<CellFailure>,
    pub summary: Vec<SummaryRow>,
    /// Rank correlation of mean F1_K-AUC and mean ROC_K-AUC across summary
    /// rows; absent when undefined.
    pub spearman: Option<f64>,
}

/// Run every cell; failing cells are recorded and the suite continues.
pub fn run_suite(
    suite: Suite,
    settings: &RunSettings,
    models: &[ModelKind],
    seeds: &[u64],
    mut progress: impl FnMut(&CellSpec, &std::result::Result<CellRun, Error>),
) -> SuiteReport {
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for cell in suite.cells(models, seeds) {
        let r = run_cell(&cell, settings);
        progress(&cell, &r);
        match r {
            Ok(run) => rows.push(run.result),
            Err(e) => failures.push(CellFailure {
                model: cell.model,
                dataset: cell.dataset.name(),
                seed: cell.seed,
                error: e.to_string(),
            }),
        }
    }
    aggregate(suite, rows, failures)
}

/// Sorted merge of cell results into the summary table.
pub fn aggregate(suite: Suite, mut rows: Vec<CellResult>, failures: Vec<CellFailure>) -> SuiteReport {
    let order: BTreeMap<String, usize> = suite
        .datasets()
        .iter()
        .enumerate()
        .map(|(i, d)| (d.name(), i))
        .collect();
    let key = |r: &CellResult| (order.get(&r.dataset).copied().unwrap_or(usize::MAX), r.dataset.clone(), r.model, r.seed);
    rows.sort_by_key(key);
    let mut groups: Vec<((String, ModelKind), Vec<&CellResult>)> = Vec::new();
    for r in &rows {
        match groups.last_mut() {
            Some((k, v)) if k.0 == r.dataset && k.1 == r.model => v.push(r),
            _ => groups.push(((r.dataset.clone(), r.model), vec![r])),
        }
    }
    let summary: Vec<SummaryRow> = groups
        .into_iter()
        .map(|((dataset, model), v)| {
            let f: Vec<f64> = v.iter().map(|r| r.f1k_auc).collect();
            let a: Vec<f64> = v.iter().map(|r| r.rock_auc).collect();
            SummaryRow {
                model,
                dataset,
                f1k_auc: Stat::of(&f).unwrap(),
                rock_auc: Stat::of(&a).unwrap(),
            }
        })
        .collect();
    let xs: Vec<f64> = summary.iter().map(|s| s.f1k_auc.mean).collect();
    let ys: Vec<f64> = summary.iter().map(|s| s.rock_auc.mean).collect();
    let rho = spearman(&xs, &ys).ok().filter(|r| r.is_finite());
    SuiteReport {
        suite,
        rows,
        failures,
        summary,
        spearman: rho,
    }
}

impl SuiteReport {
    pub fn stat(&self, model: ModelKind, dataset: &str) -> Option<&SummaryRow> {
        self.summary.iter().find(|s| s.model == model && s.dataset == dataset)
    }
}

pub fn write_results_csv(path: impl AsRef<Path>, rows: &[CellResult]) -> Result<()> {
    let mut w = csv_writer(path.as_ref())?;
    w.write_record(["model", "dataset", "seed", "delta", "m", "f1k_auc", "rock_auc"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.model.to_string(),
            r.dataset.clone(),
            r.seed.to_string(),
            r.delta.to_string(),
            r.m.to_string(),
            r.f1k_auc.to_string(),
            r.rock_auc.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary_csv(path: impl AsRef<Path>, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv_writer(path.as_ref())?;
    w.write_record(["model", "dataset", "n", "f1k_auc_mean", "f1k_auc_std", "rock_auc_mean", "rock_auc_std"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.model.to_string(),
            r.dataset.clone(),
            r.f1k_auc.n.to_string(),
            r.f1k_auc.mean.to_string(),
            r.f1k_auc.std.to_string(),
            r.rock_auc.mean.to_string(),
            r.rock_auc.std.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Plain-text mean ± std table in percent.
pub fn format_summary(report: &SuiteReport) -> String {
    let mut s = format!("{:<16} {:<14} {:>16} {:>16}\n", "dataset", "model", "F1K-AUC", "ROCK-AUC");
    for r in &report.summary {
        s.push_str(&format!(
            "{:<16} {:<14} {:>8.1} ± {:<5.1} {:>8.1} ± {:<5.1}\n",
            r.dataset,
            r.model.name(),
            100.0 * r.f1k_auc.mean,
            100.0 * r.f1k_auc.std,
            100.0 * r.rock_auc.mean,
            100.0 * r.rock_auc.std
        ));
    }
    match report.spearman {
        Some(rho) => s.push_str(&format!("spearman(F1K-AUC, ROCK-AUC) = {rho:.3}\n")),
        None => s.push_str("spearman(F1K-AUC, ROCK-AUC) undefined\n"),
    }
    for f in &report.failures {
        s.push_str(&format!("FAILED {} {} seed {}: {}\n", f.dataset, f.model, f.seed, f.error));
    }
    s
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(csv::Writer::from_writer(std::fs::File::create(path)?))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}
