//! Run configuration: a TOML file whose keys mirror the command-line flags.
//! Flags win over the file, the file wins over the preset.
//!
//! ```toml
//! preset = "desk"          # or "full"
//! dataset = "seasonal"     # anomaly type, or a directory with train/val/test.csv
//! model = "diffusion_ae"   # ae | diffusion | diffusion_ae
//! window = 100             # T
//! steps = 100              # N
//! m = [10, 20, 50, 60, 80] # test-time noise levels
//! lambda = 0.1
//! lr = 0.001
//! batch = 32
//! epochs = 100
//! seed = 0
//! out = "runs/seasonal"
//! ```

use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, ValueEnum};
use diffad::autoencoder::DecoderInput;
use diffad::diffusion::DatasetClass;
use diffad::diffusion_ae::DiffusionReduction;
use diffad::experiment::RunSettings;
use diffad::pipeline::ScalerKind;
use diffad::train::ModelKind;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const OUT_ENV: &str = "DIFFAD_OUT";

pub const BATCH_GRID: [usize; 5] = [8, 16, 32, 64, 128];
pub const LR_GRID: [f64; 2] = [1e-3, 1e-4];
pub const LAMBDA_GRID: [f64; 2] = [0.1, 0.01];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Reduced budget for a laptop CPU.
    #[default]
    Desk,
    /// Full-size models, 100 epochs.
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ScalerArg {
    MaxAbs,
    MinMax,
}

impl From<ScalerArg> for ScalerKind {
    fn from(s: ScalerArg) -> Self {
        match s {
            ScalerArg::MaxAbs => ScalerKind::MaxAbs,
            ScalerArg::MinMax => ScalerKind::MinMax,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum UnetArg {
    /// Downsampling factors [2, 4].
    Synthetic,
    /// Downsampling factors [2, 4, 8].
    Real,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DecoderArg {
    Embedded,
    PositionOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ReductionArg {
    /// Per-window squared norm.
    Sum,
    /// Squared norm divided by the window size.
    Mean,
}

fn parse_model(s: &str) -> Result<ModelKind, String> {
    ModelKind::from_str(s).map_err(|e| e.to_string())
}

/// Settings shared by `train`, `detect` and `experiment`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, Args)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// TOML file with any of these keys.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Anomaly type to generate, or a dataset directory.
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long, value_parser = parse_model)]
    pub model: Option<ModelKind>,
    /// Window length T.
    #[arg(long)]
    pub window: Option<usize>,
    /// Training noise levels N.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Test-time noise level(s) M, comma separated.
    #[arg(long = "m", value_delimiter = ',')]
    pub m: Option<Vec<usize>>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// U-Net base channel count.
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long, value_enum)]
    pub unet: Option<UnetArg>,
    #[arg(long, value_enum)]
    pub decoder_input: Option<DecoderArg>,
    /// Stop the diffusion loss from reaching the autoencoder.
    #[arg(long)]
    pub detach: Option<bool>,
    /// Scaling of the diffusion term in the joint loss.
    #[arg(long, value_enum)]
    pub reduction: Option<ReductionArg>,
    /// Scaling for CSV datasets without metadata.
    #[arg(long, value_enum)]
    pub scaler: Option<ScalerArg>,
    /// Train/validation anomaly ratio in percent for generated datasets.
    #[arg(long)]
    pub ratio: Option<f64>,
    /// Test anomaly ratio in percent for generated datasets.
    #[arg(long)]
    pub test_ratio: Option<f64>,
    /// Output directory (defaults under $DIFFAD_OUT).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

macro_rules! overlay {
    ($hi:expr, $lo:expr, $($f:ident),*) => {
        RunConfig { config: None, $($f: $hi.$f.clone().or_else(|| $lo.$f.clone())),* }
    };
}

impl RunConfig {
    pub fn from_toml(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::ConfigFile {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        toml::from_str(&text).map_err(|e| CliError::ConfigFile {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
    }

    /// `self` (flags) over the file named by `--config`, if any.
    pub fn resolve(self) -> CliResult<Self> {
        let file = match &self.config {
            Some(p) => Self::from_toml(p)?,
            None => Self::default(),
        };
        Ok(self.over(&file))
    }

    pub fn over(&self, lo: &RunConfig) -> RunConfig {
        overlay!(
            self, lo, preset, dataset, model, window, steps, m, lambda, lr, batch, epochs, warmup_epochs,
            eval_every, seed, channels, unet, decoder_input, detach, reduction, scaler, ratio, test_ratio, out
        )
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn model_kind(&self) -> ModelKind {
        self.model.unwrap_or(ModelKind::Diffusion)
    }

    /// Preset with every override applied.
    pub fn settings(&self) -> CliResult<RunSettings> {
        let mut s = match self.preset.unwrap_or_default() {
            Preset::Desk => RunSettings::desk(),
            Preset::Full => RunSettings::full(),
        };
        if let Some(w) = self.window {
            s.window = w;
        }
        let d = &mut s.model.diffusion;
        if let Some(n) = self.steps {
            d.steps = n;
        }
        if let Some(m) = &self.m {
            d.candidates = m.clone();
        }
        if let Some(c) = self.channels {
            d.unet.base_channels = c;
        }
        if let Some(u) = self.unet {
            d.unet.factors = match u {
                UnetArg::Synthetic => DatasetClass::Synthetic,
                UnetArg::Real => DatasetClass::Real,
            }
            .factors();
        }
        if let Some(l) = self.lambda {
            s.model.joint.lambda = l;
        }
        if let Some(w) = self.warmup_epochs {
            s.model.joint.warmup_epochs = w;
        }
        if let Some(d) = self.detach {
            s.model.joint.detach = d;
        }
        if let Some(r) = self.reduction {
            s.model.joint.reduction = match r {
                ReductionArg::Sum => DiffusionReduction::Sum,
                ReductionArg::Mean => DiffusionReduction::Mean,
            };
        }
        if let Some(di) = self.decoder_input {
            s.model.decoder_input = match di {
                DecoderArg::Embedded => DecoderInput::Embedded,
                DecoderArg::PositionOnly => DecoderInput::PositionOnly,
            };
        }
        if self.epochs.is_some() {
            s.ae_epochs = None;
        }
        let t = &mut s.train;
        if let Some(v) = self.lr {
            t.lr = v;
        }
        if let Some(v) = self.batch {
            t.batch = v;
        }
        if let Some(v) = self.epochs {
            t.epochs = v;
            if self.eval_every.is_none() && t.eval_every > v {
                t.eval_every = v;
            }
        }
        if let Some(v) = self.eval_every {
            t.eval_every = v;
        }
        if s.window == 0 || t.epochs == 0 || t.batch == 0 || t.eval_every == 0 {
            return Err(CliError::usage("window, epochs, batch and eval_every must be positive"));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(CliError::usage(format!("learning rate must be positive, got {}", t.lr)));
        }
        if let Some(r) = self.ratio.iter().chain(&self.test_ratio).find(|r| !(0.0..100.0).contains(*r)) {
            return Err(CliError::usage(format!("ratio {r} must be a percentage in [0, 100)")));
        }
        Ok(s)
    }

    /// Hyperparameters outside the searched grids.
    pub fn off_grid(s: &RunSettings) -> Vec<String> {
        let mut out = Vec::new();
        if !BATCH_GRID.contains(&s.train.batch) {
            out.push(format!("batch {} not in {BATCH_GRID:?}", s.train.batch));
        }
        if !LR_GRID.iter().any(|&g| (g - s.train.lr).abs() < 1e-15) {
            out.push(format!("lr {} not in {LR_GRID:?}", s.train.lr));
        }
        if !LAMBDA_GRID.iter().any(|&g| (g - s.model.joint.lambda).abs() < 1e-15) {
            out.push(format!("lambda {} not in {LAMBDA_GRID:?}", s.model.joint.lambda));
        }
        out
    }
}

/// `--out` if given, else `$DIFFAD_OUT/<default>`, else `runs/<default>`.
pub fn out_dir(explicit: Option<&Path>, default: &str) -> PathBuf {
    match explicit {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"))
            .join(default),
    }
}
