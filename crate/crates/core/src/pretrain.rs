//! Masked-patch pre-training of the context encoder: random square patches
//! of a slice are hidden, a light decoder reconstructs the slice from the
//! encoder's feature map, and the loss only counts the hidden patches.

use candle_core::{DType, Tensor};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{bail, Error, Result};
use crate::model::encoder::{ContextEncoder, EncoderConfig, MaskedDecoder};
use crate::model::params::ParamStore;
use crate::model::{batch_tensor, ENCODER_PREFIX};
use crate::seed;
use crate::volume::Volume;

/// Hidden patches of one slice.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMask {
    pub h: usize,
    pub w: usize,
    pub patch: usize,
    /// Row-major flags over the `(h/patch) × (w/patch)` patch grid.
    pub masked: Vec<bool>,
}

impl PatchMask {
    pub fn masked_patches(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    /// Per-pixel flags, true where the pixel lies in a hidden patch.
    pub fn pixel_mask(&self) -> Vec<bool> {
        let gw = self.w / self.patch;
        let mut out = Vec::with_capacity(self.h * self.w);
        for y in 0..self.h {
            for x in 0..self.w {
                out.push(self.masked[(y / self.patch) * gw + x / self.patch]);
            }
        }
        out
    }
}

/// Hide `floor(ratio · N)` of the `N` patches, chosen uniformly.
pub fn sample_mask(h: usize, w: usize, patch: usize, ratio: f64, seed_value: u64) -> Result<PatchMask> {
    if !(ratio > 0.0 && ratio < 1.0) {
        bail!(InvalidArgument, "mask ratio {ratio} outside (0, 1)");
    }
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        bail!(InvalidArgument, "patch size {patch} does not tile {h}x{w}");
    }
    let n = (h / patch) * (w / patch);
    let k = (ratio * n as f64).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed_value, &[seed::label("mask")]));
    let mut masked = vec![false; n];
    for &i in &order[..k] {
        masked[i] = true;
    }
    Ok(PatchMask { h, w, patch, masked })
}

/// Mean absolute error over the masked pixels only; `mask` is `(B, 1, H, W)`
/// with ones at hidden pixels.
pub fn masked_l1(pred: &Tensor, target: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let count = mask.sum_all()?;
    Ok(((pred - target)?.abs()? * mask)?.sum_all()?.div(&count)?)
}

fn as_refs(v: &[Vec<f64>]) -> Vec<&[f64]> {
    v.iter().map(Vec::as_slice).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub mask_ratio: f64,
    pub patch: usize,
    pub seed: u64,
    pub verbose: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 8,
            learning_rate: 1e-3,
            mask_ratio: 0.65,
            patch: 4,
            seed: 0,
            verbose: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainReport {
    /// Loss of every step.
    pub losses: Vec<f64>,
    /// Encoder tensors named exactly as in a [`crate::model::DenoiserModel`].
    pub encoder_weights: Vec<(String, Tensor)>,
}

impl PretrainReport {
    /// `step,loss` lines.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            s.push_str(&format!("{},{l:.6}\n", i + 1));
        }
        s
    }
}

/// Pre-train an encoder with the given architecture on slices of `volumes`.
pub fn pretrain_encoder(
    encoder_cfg: &EncoderConfig,
    volumes: &[&Volume],
    cfg: &PretrainConfig,
    dtype: DType,
) -> Result<PretrainReport> {
    if volumes.is_empty() {
        bail!(InvalidArgument, "no volumes to pre-train on");
    }
    if cfg.steps == 0 || cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        bail!(Config, "steps, batch size and learning rate must be positive");
    }
    let d0 = volumes[0].dims();
    if volumes.iter().any(|v| (v.dims().h, v.dims().w) != (d0.h, d0.w)) {
        bail!(DimensionMismatch, "pre-training slices differ in size");
    }
    let size = (d0.h, d0.w);
    encoder_cfg.validate(size)?;
    // Validate ratio and tiling up front rather than on the first step.
    sample_mask(size.0, size.1, cfg.patch, cfg.mask_ratio, 0)?;

    let mut store = ParamStore::new(dtype, seed::derive(cfg.seed, &[seed::label("pretrain-init")]));
    let encoder = ContextEncoder::new(&mut store, ENCODER_PREFIX, encoder_cfg)?;
    let decoder = MaskedDecoder::new(&mut store, "decoder", encoder_cfg)?;
    let mut opt = AdamW::new(
        store.vars(),
        ParamsAdamW {
            lr: cfg.learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        },
    )?;
    let mut rng = seed::rng(cfg.seed, &[seed::label("pretrain-batches")]);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let mut clean = Vec::with_capacity(cfg.batch_size);
        let mut hidden = Vec::with_capacity(cfg.batch_size);
        let mut masks = Vec::with_capacity(cfg.batch_size);
        for b in 0..cfg.batch_size {
            let v = volumes[rng.random_range(0..volumes.len())];
            let z = rng.random_range(0..v.dims().d);
            let pixels = v.slice(z)?.pixels;
            let m = sample_mask(
                size.0,
                size.1,
                cfg.patch,
                cfg.mask_ratio,
                seed::derive(cfg.seed, &[step as u64, b as u64]),
            )?
            .pixel_mask();
            hidden.push(pixels.iter().zip(&m).map(|(&p, &h)| if h { 0.0 } else { p }).collect::<Vec<f64>>());
            masks.push(m.iter().map(|&h| if h { 1.0 } else { 0.0 }).collect::<Vec<f64>>());
            clean.push(pixels);
        }
        let target = batch_tensor(&as_refs(&clean), size, dtype)?;
        let input = batch_tensor(&as_refs(&hidden), size, dtype)?;
        let mask = batch_tensor(&as_refs(&masks), size, dtype)?;
        let pred = decoder.forward(&encoder.features(&input)?)?;
        let loss = masked_l1(&pred, &target, &mask)?;
        let value: f64 = loss.to_dtype(DType::F64)?.to_scalar()?;
        if !value.is_finite() {
            return Err(Error::Diverged { step });
        }
        opt.backward_step(&loss)?;
        losses.push(value);
        if cfg.verbose && (step % 50 == 0 || step == cfg.steps) {
            eprintln!("pretrain step {step:>5}  loss {value:.5}");
        }
    }
    let encoder_weights = store
        .entries()
        .iter()
        .filter(|(n, _)| n.starts_with(ENCODER_PREFIX))
        .map(|(n, v)| (n.clone(), v.as_tensor().copy().expect("cpu copy")))
        .collect();
    Ok(PretrainReport { losses, encoder_weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DenoiserModel, ModelConfig, Preset};
    use crate::volume::Dims;

    #[test]
    fn mask_counts() {
        let m = sample_mask(32, 32, 4, 0.65, 3).unwrap();
        assert_eq!(m.masked.len(), 64);
        assert_eq!(m.masked_patches(), 41);
        assert_eq!(m.pixel_mask().iter().filter(|&&p| p).count(), 41 * 16);
        assert_eq!(sample_mask(32, 32, 4, 0.65, 3).unwrap(), m);
        assert_ne!(sample_mask(32, 32, 4, 0.65, 4).unwrap(), m);
        for bad in [0.0, 1.0, -0.5, 1.5, f64::NAN] {
            assert!(sample_mask(32, 32, 4, bad, 0).is_err());
        }
        assert!(sample_mask(30, 32, 4, 0.5, 0).is_err());
    }

    #[test]
    fn masked_loss_ignores_visible_pixels() {
        let dev = candle_core::Device::Cpu;
        let target = Tensor::new(&[[[[0.0f64, 0.0], [0.0, 0.0]]]], &dev).unwrap();
        let pred = Tensor::new(&[[[[1.0f64, 5.0], [2.0, 7.0]]]], &dev).unwrap();
        let mask = Tensor::new(&[[[[1.0f64, 0.0], [1.0, 0.0]]]], &dev).unwrap();
        let l: f64 = masked_l1(&pred, &target, &mask).unwrap().to_scalar().unwrap();
        assert!((l - 1.5).abs() < 1e-12);
    }

    #[test]
    fn pretraining_reduces_loss_and_loads_into_model() {
        let d = Dims::new(4, 16, 16).unwrap();
        let vols: Vec<Volume> = (0..3)
            .map(|k| Volume::from_fn(d, |z, y, x| ((y as f64 / 3.0 + k as f64).sin() * 0.3 + 0.5) * ((x + z) % 5) as f64 / 5.0).unwrap())
            .collect();
        let refs: Vec<&Volume> = vols.iter().collect();
        let enc = EncoderConfig {
            stage_channels: vec![4, 8, 8],
            output_dim: 6,
        };
        let cfg = PretrainConfig {
            steps: 120,
            batch_size: 4,
            learning_rate: 3e-3,
            seed: 5,
            ..Default::default()
        };
        let rep = pretrain_encoder(&enc, &refs, &cfg, DType::F32).unwrap();
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        assert!(mean(&rep.losses[100..]) < 0.8 * mean(&rep.losses[..20]), "{:?}", rep.losses);
        assert!(rep.to_csv().starts_with("step,loss\n1,"));

        let mut mc = ModelConfig::desk(Preset::Cddpm);
        mc.unet.image_size = (16, 16);
        mc.encoder = enc.clone();
        mc.context_dim = enc.output_dim;
        let model = DenoiserModel::new(mc, DType::F32, 1).unwrap();
        model.load_encoder(&rep.encoder_weights).unwrap();

        assert!(pretrain_encoder(&enc, &[], &cfg, DType::F32).is_err());
    }
}
