//! Model construction, the training loop with validation-based checkpoint
//! selection, and batched scoring.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{ae_score, AeConfig, Autoencoder, DecoderInput};
use crate::diffusion::{window_rngs, DatasetClass, DiffusionConfig, DiffusionModel};
use crate::diffusion_ae::{DiffusionAe, JointConfig};
use crate::error::{Error, Result};
use crate::eval::{f1k_auc, select_threshold};
use crate::pipeline::{concat_scores, ScoreSeries, WindowSet};
use crate::rng::{self, Rng};
use crate::substrate::{checkpoint, Adam, Graph, ParameterSet, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Ae,
    Diffusion,
    DiffusionAe,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Ae, ModelKind::Diffusion, ModelKind::DiffusionAe];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Ae => "ae",
            ModelKind::Diffusion => "diffusion",
            ModelKind::DiffusionAe => "diffusion_ae",
        }
    }

    pub fn uses_noise_level(self) -> bool {
        self != ModelKind::Ae
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "ae" | "autoencoder" => Ok(ModelKind::Ae),
            "diffusion" => Ok(ModelKind::Diffusion),
            "diffusion_ae" | "diffusionae" => Ok(ModelKind::DiffusionAe),
            other => Err(Error::config(format!("unknown model `{other}`"))),
        }
    }
}

/// Architecture settings of all three detectors; `dims` and `window` are
/// filled in from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub ae_width: usize,
    pub ae_heads: usize,
    pub ae_layers: usize,
    pub ae_ff_width: usize,
    pub decoder_input: DecoderInput,
    pub diffusion: DiffusionConfig,
    pub joint: JointConfig,
}

impl ModelConfig {
    pub fn new(kind: ModelKind) -> Self {
        Self {
            kind,
            ae_width: 64,
            ae_heads: 4,
            ae_layers: 2,
            ae_ff_width: 128,
            decoder_input: DecoderInput::PositionOnly,
            diffusion: DiffusionConfig::new(DatasetClass::Synthetic),
            joint: JointConfig::default(),
        }
    }

    pub fn ae_config(&self, dims: usize, window: usize) -> AeConfig {
        AeConfig {
            width: self.ae_width,
            heads: self.ae_heads,
            encoder_layers: self.ae_layers,
            decoder_layers: self.ae_layers,
            ff_width: self.ae_ff_width,
            decoder_input: self.decoder_input,
            ..AeConfig::new(dims, window)
        }
    }
}

/// A constructed detector of any kind.
#[derive(Clone, Debug)]
pub enum Detector {
    Ae(Autoencoder),
    Diffusion(DiffusionModel),
    Joint(DiffusionAe),
}

impl Detector {
    pub fn build(config: &ModelConfig, dims: usize, window: usize) -> Result<Self> {
        Ok(match config.kind {
            ModelKind::Ae => Detector::Ae(Autoencoder::new(config.ae_config(dims, window), "ae")?),
            ModelKind::Diffusion => Detector::Diffusion(DiffusionModel::new(config.diffusion.clone(), "unet")?),
            ModelKind::DiffusionAe => Detector::Joint(DiffusionAe::new(
                config.ae_config(dims, window),
                config.diffusion.clone(),
                config.joint.clone(),
            )?),
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Detector::Ae(_) => ModelKind::Ae,
            Detector::Diffusion(_) => ModelKind::Diffusion,
            Detector::Joint(_) => ModelKind::DiffusionAe,
        }
    }

    pub fn init_params(&self, seed: u64) -> ParameterSet<f32> {
        let mut ra = rng::named(seed, "init-ae");
        let mut ru = rng::named(seed, "init-unet");
        match self {
            Detector::Ae(ae) => ae.init_params(&mut ra),
            Detector::Diffusion(d) => d.unet.init_params(&mut ru),
            Detector::Joint(j) => j.init_params(&mut ra, &mut ru),
        }
    }

    /// Test-time noise levels to consider (empty for the autoencoder).
    pub fn candidates(&self) -> Vec<usize> {
        match self {
            Detector::Ae(_) => Vec::new(),
            Detector::Diffusion(d) => d.config.candidates.clone(),
            Detector::Joint(j) => j.diffusion.config.candidates.clone(),
        }
    }

    /// Epochs before the first epoch that trains the full objective.
    pub fn warmup_epochs(&self) -> usize {
        match self {
            Detector::Joint(j) => j.config.warmup_epochs,
            _ => 0,
        }
    }

    /// Build the loss for one batch; returns `(loss, [ae part, diffusion part])`.
    fn batch_loss(&self, g: &mut Graph<f32>, x: crate::Var, warm: bool, rng: &mut Rng) -> Result<(crate::Var, [Option<crate::Var>; 2])> {
        Ok(match self {
            Detector::Ae(ae) => {
                let (l, _) = ae.loss(g, x)?;
                (l, [Some(l), None])
            }
            Detector::Diffusion(d) => {
                let l = d.loss(g, x, rng)?;
                (l, [None, Some(l)])
            }
            Detector::Joint(j) if warm => {
                let (l, _) = j.ae.loss(g, x)?;
                (l, [Some(l), None])
            }
            Detector::Joint(j) => {
                let l = j.joint_loss(g, x, rng)?;
                (l.total, [Some(l.ae), Some(l.diffusion)])
            }
        })
    }

    /// Per-window scores. `m` is ignored by the autoencoder.
    pub fn score_windows(&self, params: &ParameterSet<f32>, windows: &WindowSet, m: usize, eval_seed: u64, batch: usize) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(windows.len());
        let idx: Vec<usize> = (0..windows.len()).collect();
        for chunk in idx.chunks(batch.max(1)) {
            let x: Tensor<f32> = windows.batch(chunk);
            let mut rngs = window_rngs(eval_seed, chunk[0], chunk.len());
            let s = match self {
                Detector::Ae(ae) => ae_score(&x, &ae.reconstruct(params, &x)?)?,
                Detector::Diffusion(d) => d.score(params, &x, m, &mut rngs)?,
                Detector::Joint(j) => j.detect(params, &x, m, &mut rngs)?,
            };
            out.extend(s);
        }
        if out.iter().flatten().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("anomaly score".into()));
        }
        Ok(out)
    }

    pub fn score(&self, params: &ParameterSet<f32>, windows: &WindowSet, m: usize, eval_seed: u64, batch: usize) -> Result<ScoreSeries> {
        let per = self.score_windows(params, windows, m, eval_seed, batch)?;
        concat_scores(windows, &per)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Epochs of the full objective (joint epochs for the joint model; its
    /// warmup runs before these).
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    /// Validate every this many epochs (and always after the last one).
    pub eval_every: usize,
    pub eval_seed: u64,
    pub eval_batch: usize,
    /// Write a checkpoint after every epoch into this directory.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 1e-3,
            batch: 32,
            seed: 0,
            eval_every: 1,
            eval_seed: 1,
            eval_batch: 50,
            checkpoint_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    /// Noise level used, 0 for the autoencoder.
    pub m: usize,
    pub delta: f64,
    pub f1k_auc: f64,
    /// Score of every noise level tried.
    pub scan: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub warmup: bool,
    pub loss: f64,
    pub ae_loss: Option<f64>,
    pub diffusion_loss: Option<f64>,
    pub validation: Option<Validation>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParameterSet<f32>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best: Validation,
}

/// Validation F1_K-AUC at every candidate noise level; ties go to the
/// smaller level.
pub fn validate(det: &Detector, params: &ParameterSet<f32>, val: &WindowSet, cfg: &TrainConfig) -> Result<Validation> {
    let candidates = match det.candidates() {
        c if c.is_empty() => vec![0],
        c => c,
    };
    let mut deltas = Vec::new();
    let (m, scan) = crate::diffusion::select_m(&candidates, |m| {
        let s = det.score(params, val, m, cfg.eval_seed, cfg.eval_batch)?;
        let t = select_threshold(&s.scores, &s.labels)?;
        deltas.push((m, t.delta));
        Ok(t.f1k_auc)
    })?;
    let delta = deltas.iter().find(|(k, _)| *k == m).map(|p| p.1).unwrap_or(0.0);
    let f1k = scan.iter().find(|(k, _)| *k == m).map(|p| p.1).unwrap();
    Ok(Validation {
        m,
        delta,
        f1k_auc: f1k,
        scan,
    })
}

/// Train with Adam; keep the parameters of the epoch with the best validation
/// F1_K-AUC (earliest on ties).
pub fn train(det: &Detector, train: &WindowSet, val: &WindowSet, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::data("no training windows"));
    }
    if cfg.epochs == 0 || cfg.batch == 0 || cfg.eval_every == 0 {
        return Err(Error::config("epochs, batch and eval_every must be >= 1"));
    }
    let adam = Adam::new(cfg.lr);
    let mut params = det.init_params(cfg.seed);
    let mut shuffle = rng::named(cfg.seed, "shuffle");
    let mut noise = rng::named(cfg.seed, "train-noise");
    let warm = det.warmup_epochs();
    let total = warm + cfg.epochs;
    let mut history = Vec::with_capacity(total);
    let mut best: Option<(usize, Validation, ParameterSet<f32>)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    for epoch in 0..total {
        let warmup = epoch < warm;
        order.shuffle(&mut shuffle);
        let mut sums = [0.0f64; 3];
        let mut parts_seen = [false; 2];
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch) {
            let x: Tensor<f32> = train.batch(chunk);
            let mut g = Graph::new();
            g.bind(&params);
            let xv = g.constant(x);
            let (loss, parts) = det.batch_loss(&mut g, xv, warmup, &mut noise)?;
            let grads = g
                .backward(loss)
                .map_err(|e| numeric_context(e, epoch))?;
            adam.step(&mut params, &grads).map_err(|e| numeric_context(e, epoch))?;
            sums[0] += g.value(loss).data()[0] as f64;
            for (i, p) in parts.iter().enumerate() {
                if let Some(v) = p {
                    sums[i + 1] += g.value(*v).data()[0] as f64;
                    parts_seen[i] = true;
                }
            }
            batches += 1;
        }
        let n = batches as f64;
        let last = epoch + 1 == total;
        let validation = if !warmup && ((epoch + 1 - warm) % cfg.eval_every == 0 || last) {
            Some(validate(det, &params, val, cfg)?)
        } else {
            None
        };
        if let Some(v) = &validation {
            if best.as_ref().is_none_or(|b| v.f1k_auc > b.1.f1k_auc) {
                best = Some((epoch, v.clone(), params.clone()));
            }
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            let header = serde_json::json!({ "epoch": epoch, "kind": det.kind() });
            checkpoint::save(&dir.join(format!("epoch-{epoch:04}.ckpt")), &header, &params)?;
        }
        history.push(EpochRecord {
            epoch,
            warmup,
            loss: sums[0] / n,
            ae_loss: parts_seen[0].then(|| sums[1] / n),
            diffusion_loss: parts_seen[1].then(|| sums[2] / n),
            validation,
        });
    }
    let (best_epoch, best, params) = best.expect("the last epoch always validates");
    Ok(TrainOutcome {
        params,
        history,
        best_epoch,
        best,
    })
}

fn numeric_context(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch}: {m}")),
        other => other,
    }
}

/// F1_K-AUC of `scores` at the validation-selected threshold `delta`.
pub fn test_f1k(scores: &ScoreSeries, delta: f64) -> Result<f64> {
    Ok(f1k_auc(&scores.scores, &scores.labels, delta)?.area)
}

/// Checkpoint header describing how to rebuild and apply a trained detector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCard {
    pub model: ModelConfig,
    pub dims: usize,
    pub window: usize,
    /// Scaling fitted on the training split.
    pub scaler: Option<crate::pipeline::Scaler>,
    pub best_epoch: usize,
    pub validation: Validation,
}

impl ModelCard {
    pub fn detector(&self) -> Result<Detector> {
        Detector::build(&self.model, self.dims, self.window)
    }

    pub fn save(&self, path: &std::path::Path, params: &ParameterSet<f32>) -> Result<()> {
        checkpoint::save(path, &serde_json::to_value(self)?, params)
    }

    pub fn load(path: &std::path::Path) -> Result<(Self, ParameterSet<f32>)> {
        let (header, params) = checkpoint::load(path)?;
        let card: ModelCard = serde_json::from_value(header)
            .map_err(|e| Error::Checkpoint(format!("{}: not a model checkpoint: {e}", path.display())))?;
        Ok((card, params))
    }
}
