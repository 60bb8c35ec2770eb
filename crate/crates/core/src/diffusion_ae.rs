//! Autoencoder and diffusion denoiser trained together.
//!
//! The diffusion model learns to denoise corrupted autoencoder
//! reconstructions. Training minimises `L_AE + λ·L_Dif` in one backward pass,
//! so the diffusion loss also shapes the autoencoder. Detection corrupts the
//! reconstruction, runs the reverse chain, and compares the result against
//! the original window.

use serde::{Deserialize, Serialize};

use crate::autoencoder::{AeConfig, Autoencoder};
use crate::diffusion::{
    corrupt_and_denoise, diff_score, draw_training_noise, noise_loss, DiffusionConfig, DiffusionModel,
};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::substrate::{Graph, ParameterSet, Real, Tensor, Var};

pub const AE_PREFIX: &str = "ae";
pub const UNET_PREFIX: &str = "unet";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointConfig {
    /// Weight of the diffusion loss.
    pub lambda: f64,
    /// Autoencoder-only epochs before joint training.
    pub warmup_epochs: usize,
    /// Stop the diffusion loss from reaching the autoencoder.
    pub detach: bool,
    #[serde(default)]
    pub reduction: DiffusionReduction,
}

/// How the diffusion term enters the joint loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffusionReduction {
    /// Per-window squared norm, as in the standalone diffusion loss.
    Sum,
    /// Divided by the elements per window, matching the scale of `L_AE`.
    #[default]
    Mean,
}

impl Default for JointConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            warmup_epochs: 5,
            detach: false,
            reduction: DiffusionReduction::Mean,
        }
    }
}

impl JointConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("lambda must be positive, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Loss terms of one joint step.
#[derive(Clone, Copy, Debug)]
pub struct JointLoss {
    pub total: Var,
    pub ae: Var,
    pub diffusion: Var,
    pub recon: Var,
}

#[derive(Clone, Debug)]
pub struct DiffusionAe {
    pub config: JointConfig,
    pub ae: Autoencoder,
    pub diffusion: DiffusionModel,
}

impl DiffusionAe {
    pub fn new(ae: AeConfig, diffusion: DiffusionConfig, config: JointConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            ae: Autoencoder::new(ae, AE_PREFIX)?,
            diffusion: DiffusionModel::new(diffusion, UNET_PREFIX)?,
            config,
        })
    }

    /// One parameter set holding both `ae.*` and `unet.*`.
    pub fn init_params<R: Real>(&self, rng_ae: &mut Rng, rng_unet: &mut Rng) -> ParameterSet<R> {
        let mut ps = self.ae.init_params(rng_ae);
        self.diffusion.unet.init(&mut ps, rng_unet);
        ps
    }

    /// `L = L_AE + λ L_Dif` with the diffusion term evaluated on the
    /// reconstruction, using the given noise levels and noise.
    pub fn joint_loss_with<R: Real>(
        &self,
        g: &mut Graph<R>,
        x0: Var,
        levels: &[usize],
        eps: &Tensor<R>,
        lambda: f64,
    ) -> Result<JointLoss> {
        let (ae, recon) = self.ae.loss(g, x0)?;
        let start = if self.config.detach {
            g.constant(g.value(recon).clone())
        } else {
            recon
        };
        let diffusion = noise_loss(g, &self.diffusion.unet, &self.diffusion.schedule, start, levels, eps)?;
        let per_window = match self.config.reduction {
            DiffusionReduction::Sum => 1.0,
            DiffusionReduction::Mean => 1.0 / (eps.len() / eps.shape()[0]) as f64,
        };
        let weighted = g.scale(diffusion, lambda * per_window);
        let total = g.add(ae, weighted);
        Ok(JointLoss {
            total,
            ae,
            diffusion,
            recon,
        })
    }

    pub fn joint_loss<R: Real>(&self, g: &mut Graph<R>, x0: Var, rng: &mut Rng) -> Result<JointLoss> {
        let shape = g.shape(x0).to_vec();
        let (levels, eps) = draw_training_noise(self.diffusion.schedule.steps(), &shape, rng);
        self.joint_loss_with(g, x0, &levels, &eps, self.config.lambda)
    }

    /// Reconstruct, corrupt the reconstruction to level `m`, denoise.
    pub fn denoise_reconstruction<R: Real>(
        &self,
        params: &ParameterSet<R>,
        x0: &Tensor<R>,
        m: usize,
        rngs: &mut [Rng],
    ) -> Result<Tensor<R>> {
        let recon = self.ae.reconstruct(params, x0)?;
        corrupt_and_denoise(
            &self.diffusion.unet,
            params,
            &self.diffusion.schedule,
            &recon,
            m,
            self.diffusion.config.noise_coefficient,
            rngs,
        )
    }

    /// Per-timestep scores of `x0` against its denoised reconstruction.
    pub fn detect<R: Real>(&self, params: &ParameterSet<R>, x0: &Tensor<R>, m: usize, rngs: &mut [Rng]) -> Result<Vec<Vec<f64>>> {
        let out = self.denoise_reconstruction(params, x0, m, rngs)?;
        diff_score(x0, &out)
    }
}
