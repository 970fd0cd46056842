//! Context encoder: strided conv stages, global average pooling, dense head.

use candle_core::{Module, Tensor};

use super::layers::{silu, Conv2d, ConvTranspose2d, Linear};
use super::params::ParamStore;
use crate::error::{bail, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    /// Output channels of each stride-2 stage.
    pub stage_channels: Vec<usize>,
    /// Length of the context vector.
    pub output_dim: usize,
}

impl EncoderConfig {
    pub fn validate(&self, image: (usize, usize)) -> Result<()> {
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) || self.output_dim == 0 {
            bail!(Config, "encoder needs at least one stage, positive widths and output dim");
        }
        let f = 1 << self.stage_channels.len();
        if image.0 % f != 0 || image.1 % f != 0 {
            bail!(Config, "image {}x{} not divisible by encoder stride {f}", image.0, image.1);
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ContextEncoder {
    stages: Vec<Conv2d>,
    head: Linear,
}

impl ContextEncoder {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &EncoderConfig) -> Result<Self> {
        let mut stages = Vec::new();
        let mut c_in = 1;
        for (i, &c) in cfg.stage_channels.iter().enumerate() {
            stages.push(Conv2d::new(store, &format!("{prefix}.stage{i}"), c_in, c, 3, 2)?);
            c_in = c;
        }
        let head = Linear::new(store, &format!("{prefix}.head"), c_in, cfg.output_dim)?;
        Ok(Self { stages, head })
    }

    /// Spatial feature map after the last stage, `(B, C_last, H/2^n, W/2^n)`.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for stage in &self.stages {
            h = silu(&stage.forward(&h)?)?;
        }
        Ok(h)
    }

    /// `(B, 1, H, W)` slices to `(B, d)` context vectors.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.features(x)?;
        let pooled = h.mean(3)?.mean(2)?;
        Ok(self.head.forward(&pooled)?)
    }
}

/// Decoder used only for masked pre-training: two transposed-conv stages
/// that bring the encoder's last feature map back to image resolution.
#[derive(Debug, Clone)]
pub struct MaskedDecoder {
    up1: ConvTranspose2d,
    up2: ConvTranspose2d,
}

impl MaskedDecoder {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &EncoderConfig) -> Result<Self> {
        let n = cfg.stage_channels.len();
        let c_last = *cfg.stage_channels.last().expect("validated");
        let s1 = 1usize << n.div_ceil(2);
        let s2 = 1usize << (n / 2);
        let mid = c_last.max(4);
        Ok(Self {
            up1: ConvTranspose2d::new(store, &format!("{prefix}.up1"), c_last, mid, s1)?,
            up2: ConvTranspose2d::new(store, &format!("{prefix}.up2"), mid, 1, s2)?,
        })
    }

    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        let h = silu(&self.up1.forward(features)?)?;
        Ok(self.up2.forward(&h)?)
    }
}
