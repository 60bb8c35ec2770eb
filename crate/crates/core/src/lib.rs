//! Reconstruction-based anomaly detection for multivariate time series with
//! denoising diffusion models.
//!
//! The crate bundles everything needed for desk-scale experiments:
//!
//! * [`substrate`]: tensors, reverse-mode autodiff, layers, Adam, checkpoints
//! * [`synthgen`]: synthetic benchmark series with injected anomalies
//! * [`pipeline`]: scaling, windowing, CSV ingestion and score reassembly
//! * [`autoencoder`]: Transformer autoencoder with a mean-pooled bottleneck
//! * [`diffusion`]: noise schedule, U-Net denoiser, training and denoising
//! * [`diffusion_ae`]: the jointly trained autoencoder + diffusion detector
//! * [`eval`]: PA%K point adjustment, F1_K-AUC, ROC_K-AUC, Spearman
//! * [`experiment`]: end-to-end runs and the experiment suites

pub mod autoencoder;
pub mod diffusion;
pub mod diffusion_ae;
mod error;
pub mod eval;
pub mod experiment;
pub mod pipeline;
pub mod rng;
pub mod substrate;
pub mod synthgen;
pub mod train;

pub use error::{Error, Result};
pub use substrate::{Graph, ParameterSet, Real, Tensor, Var};
