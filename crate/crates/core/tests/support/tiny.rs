//! Small model configurations for fast tests.

use diffad::autoencoder::AeConfig;
use diffad::diffusion::{DatasetClass, DiffusionConfig, UNetConfig};

pub fn tiny_ae(dims: usize, window: usize) -> AeConfig {
    AeConfig {
        width: 8,
        heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        ff_width: 16,
        ..AeConfig::new(dims, window)
    }
}

pub fn tiny_diffusion() -> DiffusionConfig {
    DiffusionConfig {
        unet: UNetConfig {
            base_channels: 4,
            groups: 2,
            time_dim: 8,
            ..UNetConfig::new(DatasetClass::Synthetic)
        },
        ..DiffusionConfig::new(DatasetClass::Synthetic)
    }
}

