//! The five subcommands.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use diffad::eval::{evaluate, rock_auc_with, Evaluation, RocAggregation};
use diffad::experiment::{
    aggregate, format_summary, run_cell, train_prepared, write_results_csv, write_summary_csv, CellFailure, Suite,
    DEFAULT_SEEDS,
};
use diffad::pipeline::{
    load_csv, load_dataset_dir, make_windows, read_scores_csv, save_dataset_dir, write_scores_csv, LabeledSeries, Scaler,
    ScalerKind, ScoreSeries, WindowSet,
};
use diffad::synthgen::{generate_dataset, AnomalyType, DatasetMeta, SynthConfig, SPLIT_NAMES};
use diffad::train::{validate, EpochRecord, ModelCard, ModelKind, TrainConfig};
use diffad::{Error, Result};
use serde::Serialize;

use crate::config::{out_dir, RunConfig, ScalerArg};
use crate::error::{CliError, CliResult};
use crate::plot::{line_chart, Series};
use crate::report::{DatasetStats, MetricRow, RunReport};

fn parse_type(s: &str) -> std::result::Result<AnomalyType, String> {
    s.parse::<AnomalyType>().map_err(|e| e.to_string())
}

fn parse_suite(s: &str) -> std::result::Result<Suite, String> {
    s.parse::<Suite>().map_err(|e| e.to_string())
}

fn parse_model(s: &str) -> std::result::Result<ModelKind, String> {
    s.parse::<ModelKind>().map_err(|e| e.to_string())
}

fn pct(r: Option<f64>) -> Option<f64> {
    r.map(|p| p / 100.0)
}

// ---------- generate ----------

#[derive(Clone, Debug, Args, Serialize)]
pub struct GenerateArgs {
    /// Anomaly type: global, contextual, seasonal, shapelet, trend, multi.
    #[arg(long = "type", value_parser = parse_type)]
    pub kind: AnomalyType,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Anomaly ratio in percent (all splits).
    #[arg(long)]
    pub ratio: Option<f64>,
    /// Test-split anomaly ratio in percent.
    #[arg(long)]
    pub test_ratio: Option<f64>,
    #[arg(long)]
    pub dims: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn synth_config(kind: AnomalyType, seed: u64, ratio: Option<f64>, test_ratio: Option<f64>) -> CliResult<SynthConfig> {
    let mut c = SynthConfig::new(kind, seed);
    for r in ratio.iter().chain(&test_ratio) {
        if !(0.0..100.0).contains(r) {
            return Err(CliError::usage(format!("ratio {r} must be a percentage in [0, 100)")));
        }
    }
    if let Some(r) = pct(ratio) {
        c.ratio = r;
    }
    c.test_ratio = pct(test_ratio);
    Ok(c)
}

pub fn generate(args: &GenerateArgs) -> CliResult<PathBuf> {
    let start = Instant::now();
    let mut c = synth_config(args.kind, args.seed, args.ratio, args.test_ratio)?;
    if let Some(d) = args.dims {
        c.dims = d;
    }
    let data = generate_dataset(&c)?;
    let out = out_dir(args.out.as_deref(), &format!("data/{}-s{}", args.kind, args.seed));
    save_dataset_dir(&out, &data)?;
    let stats = DatasetStats::of(&args.kind.to_string(), Some(args.kind), &data.splits().map(|(_, s)| s.clone()));
    for s in &stats.splits {
        eprintln!("{:<5} {:>6} steps  {:>5} anomalous ({:.2}%)", s.name, s.len, s.anomalies, 100.0 * s.ratio);
    }
    let _ = start;
    Ok(out)
}

// ---------- data loading shared by train / detect ----------

pub struct LoadedData {
    pub name: String,
    pub anomaly_type: Option<AnomalyType>,
    pub splits: [LabeledSeries; 3],
}

impl LoadedData {
    pub fn stats(&self) -> DatasetStats {
        DatasetStats::of(&self.name, self.anomaly_type, &self.splits)
    }

    pub fn scaler_kind(&self, explicit: Option<ScalerArg>) -> ScalerKind {
        match (explicit, self.anomaly_type) {
            (Some(s), _) => s.into(),
            (None, Some(k)) => ScalerKind::for_type(k),
            (None, None) => ScalerKind::MaxAbs,
        }
    }
}

pub fn load_data(cfg: &RunConfig) -> CliResult<LoadedData> {
    let spec = cfg
        .dataset
        .as_deref()
        .ok_or_else(|| CliError::usage("--dataset is required (anomaly type or directory)"))?;
    let p = Path::new(spec);
    if p.is_dir() {
        let splits = load_dataset_dir(p)?;
        let meta = p.join("meta.json");
        let anomaly_type = if meta.is_file() {
            let m: DatasetMeta = serde_json::from_str(&std::fs::read_to_string(&meta)?)?;
            Some(m.config.anomaly_type)
        } else {
            None
        };
        let name = p.file_name().map_or(spec.to_string(), |n| n.to_string_lossy().into_owned());
        return Ok(LoadedData {
            name,
            anomaly_type,
            splits,
        });
    }
    match spec.parse::<AnomalyType>() {
        Ok(kind) => {
            let c = synth_config(kind, cfg.seed(), cfg.ratio, cfg.test_ratio)?;
            let d = generate_dataset(&c)?;
            Ok(LoadedData {
                name: kind.to_string(),
                anomaly_type: Some(kind),
                splits: [d.train, d.val, d.test],
            })
        }
        Err(_) => Err(Error::Data(format!("dataset `{spec}` is neither an anomaly type nor a directory")).into()),
    }
}

fn windows(splits: &[LabeledSeries; 3], scaler: &Scaler, window: usize) -> Result<[WindowSet; 3]> {
    let w = |s: &LabeledSeries| make_windows(&scaler.apply(s)?, window);
    Ok([w(&splits[0])?, w(&splits[1])?, w(&splits[2])?])
}

fn metric_rows(e: &Evaluation) -> Vec<MetricRow> {
    vec![MetricRow {
        split: "test".into(),
        f1k_auc: e.f1k_auc(),
        rock_auc: e.rock_auc(),
    }]
}

fn write_loss_csv(path: &Path, history: &[EpochRecord]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
    w.write_record(["epoch", "phase", "loss", "ae_loss", "diffusion_loss", "val_f1k_auc", "val_m", "val_delta"])
        .map_err(csv_io)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for h in history {
        let v = h.validation.as_ref();
        w.write_record([
            h.epoch.to_string(),
            if h.warmup { "warmup".into() } else { "train".into() },
            h.loss.to_string(),
            opt(h.ae_loss),
            opt(h.diffusion_loss),
            opt(v.map(|v| v.f1k_auc)),
            v.map_or(String::new(), |v| v.m.to_string()),
            opt(v.map(|v| v.delta)),
        ])
        .map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> CliError {
    CliError::Core(Error::Io(std::io::Error::other(e)))
}

// ---------- train ----------

#[derive(Clone, Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunConfig,
    /// Also keep a checkpoint of every epoch.
    #[arg(long)]
    pub keep_epochs: bool,
}

#[derive(Serialize)]
struct ResolvedRun<'a> {
    run: &'a RunConfig,
    settings: &'a diffad::experiment::RunSettings,
    model: ModelKind,
}

pub fn train(args: &TrainArgs) -> CliResult<PathBuf> {
    let start = Instant::now();
    let cfg = args.run.clone().resolve()?;
    let mut settings = cfg.settings()?;
    for w in RunConfig::off_grid(&settings) {
        eprintln!("warning: {w}");
    }
    let kind = cfg.model_kind();
    let data = load_data(&cfg)?;
    let seed = cfg.seed();
    let out = out_dir(cfg.out.as_deref(), &format!("train/{}-{}-s{seed}", kind, data.name));
    std::fs::create_dir_all(&out)?;
    if args.keep_epochs {
        settings.train.checkpoint_dir = Some(out.join("epochs"));
    }
    let scaler = Scaler::fit(&data.splits[0], data.scaler_kind(cfg.scaler))?;
    let [tr, va, te] = windows(&data.splits, &scaler, settings.window)?;
    let (det, outcome) = train_prepared(&tr, &va, &settings, kind, seed)?;
    let card = ModelCard {
        model: settings.model_config(kind),
        dims: tr.dims,
        window: settings.window,
        scaler: Some(scaler),
        best_epoch: outcome.best_epoch,
        validation: outcome.best.clone(),
    };
    card.save(&out.join("model.ckpt"), &outcome.params)?;
    write_loss_csv(&out.join("loss.csv"), &outcome.history)?;

    let tc: TrainConfig = settings.train_config(kind, seed);
    let m = outcome.best.m;
    let val_s = det.score(&outcome.params, &va, m, tc.eval_seed, tc.eval_batch)?;
    let test_s = det.score(&outcome.params, &te, m, tc.eval_seed, tc.eval_batch)?;
    write_scores_csv(out.join("val_scores.csv"), &val_s)?;
    write_scores_csv(out.join("test_scores.csv"), &test_s)?;
    let e = evaluate(&val_s, &test_s)?;

    let mut report = RunReport::new(
        "train",
        &ResolvedRun {
            run: &cfg,
            settings: &settings,
            model: kind,
        },
    )?;
    report.dataset = Some(data.stats());
    report.seed = Some(seed);
    report.delta = Some(e.threshold.delta);
    report.m = kind.uses_noise_level().then_some(m);
    report.best_epoch = Some(outcome.best_epoch);
    report.metrics = metric_rows(&e);
    report.record_dropped([&tr, &va, &te]);
    report.artifacts = ["model.ckpt", "loss.csv", "val_scores.csv", "test_scores.csv"]
        .map(String::from)
        .to_vec();
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    report.write(&out)?;
    eprintln!(
        "best epoch {} (M = {m}, δ = {:.4}): test F1K-AUC {:.4}, ROCK-AUC {:.4}",
        outcome.best_epoch,
        e.threshold.delta,
        e.f1k_auc(),
        e.rock_auc()
    );
    Ok(out)
}

// ---------- detect ----------

#[derive(Clone, Debug, Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub run: RunConfig,
}

pub fn detect(args: &DetectArgs) -> CliResult<PathBuf> {
    let start = Instant::now();
    let cfg = args.run.clone().resolve()?;
    if !args.checkpoint.is_file() {
        return Err(Error::Data(format!("checkpoint {} does not exist", args.checkpoint.display())).into());
    }
    let (mut card, params) = ModelCard::load(&args.checkpoint)?;
    let data = load_data(&cfg)?;
    if data.splits[0].dims() != card.dims {
        return Err(Error::Shape(format!(
            "checkpoint expects D = {} features, dataset has {}",
            card.dims,
            data.splits[0].dims()
        ))
        .into());
    }
    let seed = cfg.seed();
    let out = out_dir(cfg.out.as_deref(), &format!("detect/{}-{}-s{seed}", card.model.kind, data.name));
    std::fs::create_dir_all(&out)?;
    let scaler = match card.scaler.clone() {
        Some(s) => s,
        None => Scaler::fit(&data.splits[0], data.scaler_kind(cfg.scaler))?,
    };
    let ws = windows(&data.splits, &scaler, card.window)?;
    let tc = TrainConfig {
        seed,
        eval_seed: seed,
        ..TrainConfig::default()
    };
    let kind = card.model.kind;
    let m = match cfg.m.as_deref() {
        _ if !kind.uses_noise_level() => 0,
        Some([one]) => *one,
        Some(many) => {
            card.model.diffusion.candidates = many.to_vec();
            let det = card.detector()?;
            let v = validate(&det, &params, &ws[1], &tc)?;
            eprintln!("noise level scan on validation: {:?}", v.scan);
            v.m
        }
        None => card.validation.m,
    };
    if kind.uses_noise_level() && (m == 0 || m > card.model.diffusion.steps) {
        return Err(CliError::usage(format!("noise level {m} outside 1..={}", card.model.diffusion.steps)));
    }
    let det = card.detector()?;
    let mut scores: Vec<ScoreSeries> = Vec::new();
    let mut artifacts = Vec::new();
    for (w, name) in ws.iter().zip(SPLIT_NAMES) {
        let s = det.score(&params, w, m, tc.eval_seed, tc.eval_batch)?;
        let file = format!("{name}_scores.csv");
        write_scores_csv(out.join(&file), &s)?;
        artifacts.push(file);
        scores.push(s);
    }
    let mut report = RunReport::new("detect", &cfg)?;
    report.dataset = Some(data.stats());
    report.seed = Some(seed);
    report.m = kind.uses_noise_level().then_some(m);
    report.record_dropped([&ws[0], &ws[1], &ws[2]]);
    if let Ok(e) = evaluate(&scores[1], &scores[2]) {
        report.delta = Some(e.threshold.delta);
        report.metrics = metric_rows(&e);
    }
    report.artifacts = artifacts;
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    report.write(&out)?;
    Ok(out)
}

// ---------- eval ----------

#[derive(Clone, Debug, Args, Serialize)]
pub struct EvalArgs {
    /// Directory holding val_scores.csv and test_scores.csv.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Dataset directory whose val/test labels replace those in the score files.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Aggregate ROC_K by the pooled upper envelope instead of the mean.
    #[arg(long)]
    pub pooled_roc: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Longest unscored tail accepted when aligning scores to labels.
const MAX_TAIL: usize = 10_000;

fn with_labels(s: ScoreSeries, labels: Option<&Path>, split: &str) -> CliResult<ScoreSeries> {
    let Some(dir) = labels else { return Ok(s) };
    let l = load_csv(dir.join(format!("{split}.csv")))?;
    // scores cover the leading full windows; the dropped tail has no score
    if l.len() < s.len() || l.len() - s.len() >= MAX_TAIL {
        return Err(Error::Data(format!("{split}: {} scores do not align with {} labels", s.len(), l.len())).into());
    }
    let n = s.len();
    Ok(ScoreSeries::new(s.scores, l.labels[..n].to_vec())?)
}

pub fn eval(args: &EvalArgs) -> CliResult<PathBuf> {
    let start = Instant::now();
    let (vp, tp) = match (&args.scores, &args.val, &args.test) {
        (Some(d), None, None) => (d.join("val_scores.csv"), d.join("test_scores.csv")),
        (None, Some(v), Some(t)) => (v.clone(), t.clone()),
        _ => return Err(CliError::usage("give either --scores DIR or both --val and --test")),
    };
    let val = with_labels(read_scores_csv(&vp)?, args.labels.as_deref(), "val")?;
    let test = with_labels(read_scores_csv(&tp)?, args.labels.as_deref(), "test")?;
    let mut e = evaluate(&val, &test)?;
    if args.pooled_roc {
        e.rock = rock_auc_with(&test.scores, &test.labels, RocAggregation::PooledEnvelope)?;
    }
    let default_out = args.scores.as_ref().map(|d| d.join("eval"));
    let out = match (&args.out, default_out) {
        (Some(o), _) => o.clone(),
        (None, Some(d)) => d,
        (None, None) => out_dir(None, "eval"),
    };
    std::fs::create_dir_all(&out)?;
    write_curves(&out, &e)?;
    let mut report = RunReport::new("eval", args)?;
    report.delta = Some(e.threshold.delta);
    report.metrics = metric_rows(&e);
    report.artifacts = ["f1k_curve.csv", "f1k_curve.svg", "roc_k.csv", "roc_k.svg", "thresholds.csv"]
        .map(String::from)
        .to_vec();
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    report.write(&out)?;
    eprintln!(
        "δ = {:.4}: F1K-AUC {:.4}, ROCK-AUC {:.4}",
        e.threshold.delta,
        e.f1k_auc(),
        e.rock_auc()
    );
    Ok(out)
}

/// K values drawn in the ROC plot.
const ROC_PLOT_K: [usize; 5] = [0, 25, 50, 75, 100];

fn write_curves(out: &Path, e: &Evaluation) -> CliResult<()> {
    let mut w = csv::Writer::from_path(out.join("f1k_curve.csv")).map_err(csv_io)?;
    w.write_record(["k", "f1"]).map_err(csv_io)?;
    for (k, f) in e.f1k.x.iter().zip(&e.f1k.y) {
        w.write_record([k.to_string(), f.to_string()]).map_err(csv_io)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(out.join("roc_k.csv")).map_err(csv_io)?;
    w.write_record(["k", "fpr", "tpr"]).map_err(csv_io)?;
    for (k, c) in e.rock.curves.iter().enumerate() {
        for (x, y) in c.x.iter().zip(&c.y) {
            w.write_record([k.to_string(), x.to_string(), y.to_string()]).map_err(csv_io)?;
        }
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(out.join("thresholds.csv")).map_err(csv_io)?;
    w.write_record(["delta", "val_f1k_auc"]).map_err(csv_io)?;
    for (d, a) in &e.threshold.scan {
        w.write_record([d.to_string(), a.to_string()]).map_err(csv_io)?;
    }
    w.flush()?;

    let f1 = Series {
        label: "F1".into(),
        points: e.f1k.x.iter().copied().zip(e.f1k.y.iter().copied()).collect(),
    };
    let svg = line_chart(
        &format!("F1 vs K at δ = {:.4} (area {:.3})", e.threshold.delta, e.f1k_auc()),
        "K (%)",
        "F1",
        (0.0, 100.0),
        (0.0, 1.0),
        &[f1],
    );
    std::fs::write(out.join("f1k_curve.svg"), svg)?;
    let rocs: Vec<Series> = ROC_PLOT_K
        .iter()
        .filter_map(|&k| e.rock.curves.get(k).map(|c| (k, c)))
        .map(|(k, c)| Series {
            label: format!("K = {k}"),
            points: c.x.iter().copied().zip(c.y.iter().copied()).collect(),
        })
        .collect();
    let svg = line_chart(
        &format!("ROC per K (ROC_K-AUC {:.3})", e.rock_auc()),
        "FPR",
        "TPR",
        (0.0, 1.0),
        (0.0, 1.0),
        &rocs,
    );
    std::fs::write(out.join("roc_k.svg"), svg)?;
    Ok(())
}

// ---------- experiment ----------

#[derive(Clone, Debug, Args)]
pub struct ExperimentArgs {
    /// ratio_study, multi_anomaly or table2_synthetic.
    #[arg(long, value_parser = parse_suite)]
    pub suite: Suite,
    #[arg(long, value_delimiter = ',', value_parser = parse_model)]
    pub models: Option<Vec<ModelKind>>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Run only the cells of these dataset rows (e.g. `seasonal_r1`).
    #[arg(long, value_delimiter = ',')]
    pub only: Option<Vec<String>>,
    #[command(flatten)]
    pub run: RunConfig,
}

#[derive(Serialize)]
struct SuiteEcho<'a> {
    suite: Suite,
    models: &'a [ModelKind],
    seeds: &'a [u64],
    settings: &'a diffad::experiment::RunSettings,
}

pub fn experiment(args: &ExperimentArgs) -> CliResult<PathBuf> {
    let start = Instant::now();
    let cfg = args.run.clone().resolve()?;
    let settings = cfg.settings()?;
    for w in RunConfig::off_grid(&settings) {
        eprintln!("warning: {w}");
    }
    let models = args.models.clone().unwrap_or_else(|| ModelKind::ALL.to_vec());
    let seeds = args.seeds.clone().unwrap_or_else(|| DEFAULT_SEEDS.to_vec());
    let out = out_dir(cfg.out.as_deref(), &format!("experiment/{}", args.suite));
    std::fs::create_dir_all(&out)?;
    let cells: Vec<_> = args
        .suite
        .cells(&models, &seeds)
        .into_iter()
        .filter(|c| args.only.as_ref().is_none_or(|o| o.contains(&c.dataset.name())))
        .collect();
    if cells.is_empty() {
        return Err(CliError::usage("no experiment cells selected"));
    }
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (i, cell) in cells.iter().enumerate() {
        match run_cell(cell, &settings) {
            Ok(run) => {
                eprintln!(
                    "[{}/{}] {} {} seed {}: F1K-AUC {:.4} ROCK-AUC {:.4} ({:.0}s)",
                    i + 1,
                    cells.len(),
                    cell.dataset.name(),
                    cell.model,
                    cell.seed,
                    run.result.f1k_auc,
                    run.result.rock_auc,
                    run.seconds
                );
                rows.push(run.result);
            }
            Err(e) => {
                eprintln!("[{}/{}] {} {} seed {}: FAILED {e}", i + 1, cells.len(), cell.dataset.name(), cell.model, cell.seed);
                failures.push(CellFailure {
                    model: cell.model,
                    dataset: cell.dataset.name(),
                    seed: cell.seed,
                    error: e.to_string(),
                });
            }
        }
    }
    let all_failed = rows.is_empty();
    let report = aggregate(args.suite, rows, failures);
    write_results_csv(out.join("results.csv"), &report.rows)?;
    write_summary_csv(out.join("summary.csv"), &report.summary)?;
    let text = format_summary(&report);
    std::fs::write(out.join("summary.txt"), &text)?;
    print!("{text}");
    let mut run_report = RunReport::new(
        "experiment",
        &SuiteEcho {
            suite: args.suite,
            models: &models,
            seeds: &seeds,
            settings: &settings,
        },
    )?;
    run_report.metrics = report
        .summary
        .iter()
        .map(|s| MetricRow {
            split: format!("{}/{}", s.dataset, s.model),
            f1k_auc: s.f1k_auc.mean,
            rock_auc: s.rock_auc.mean,
        })
        .collect();
    run_report.artifacts = ["results.csv", "summary.csv", "summary.txt", "suite.json"]
        .map(String::from)
        .to_vec();
    std::fs::write(out.join("suite.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    run_report.wall_clock_secs = start.elapsed().as_secs_f64();
    run_report.write(&out)?;
    if all_failed {
        let first = &report.failures[0];
        return Err(Error::Data(format!("every cell failed; first: {}", first.error)).into());
    }
    Ok(out)
}
