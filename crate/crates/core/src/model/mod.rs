//! The conditioned denoiser.
//!
//! A context encoder embeds the noise-free slice into `c ∈ R^d`, a time MLP
//! turns the sinusoidal step embedding into `c_t ∈ R^d`, and one MLP per
//! U-Net level projects `[c ; c_t]` to `2·C_i` modulation values that scale
//! and shift the features of every residual block at that level. The
//! unconditioned baseline is the same network with `c` replaced by zeros.

pub mod checkpoint;
pub mod encoder;
pub mod film;
pub mod layers;
pub mod ops;
pub mod params;
pub mod unet;

use std::str::FromStr;

use candle_core::{DType, Device, Module, Tensor};

use crate::error::{bail, Error, Result};
use crate::volume::Slice;
use encoder::{ContextEncoder, EncoderConfig};
use film::{sinusoidal_tensor, ContextVector};
use layers::{silu, Linear};
use params::ParamStore;
use unet::{UNet, UNetConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Preset {
    /// Time conditioning only; the context half of the condition is zero.
    Ddpm,
    /// Time and image-context conditioning.
    Cddpm,
}

impl Preset {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Ddpm => "ddpm",
            Self::Cddpm => "cddpm",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(Self::Ddpm),
            "cddpm" => Ok(Self::Cddpm),
            other => Err(Error::Unknown {
                kind: "preset",
                name: other.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub preset: Preset,
    pub unet: UNetConfig,
    pub encoder: EncoderConfig,
    /// Conditioning dimension `d`, shared by `c` and `c_t`.
    pub context_dim: usize,
    /// Zero the last layer of every level projection so modulation starts as identity.
    pub film_zero_init: bool,
    pub zero_output_head: bool,
}

impl ModelConfig {
    /// 32×32 slices, levels [16, 32, 32], d = 32.
    pub fn desk(preset: Preset) -> Self {
        Self {
            preset,
            unet: UNetConfig {
                level_channels: vec![16, 32, 32],
                groups: 8,
                image_size: (32, 32),
            },
            encoder: EncoderConfig {
                stage_channels: vec![8, 16, 32, 32],
                output_dim: 32,
            },
            context_dim: 32,
            film_zero_init: true,
            zero_output_head: false,
        }
    }

    /// 96×96 slices, levels [128, 256, 256], d = 128.
    pub fn full(preset: Preset) -> Self {
        Self {
            preset,
            unet: UNetConfig {
                level_channels: vec![128, 256, 256],
                groups: 32,
                image_size: (96, 96),
            },
            encoder: EncoderConfig {
                stage_channels: vec![64, 128, 256, 512],
                output_dim: 128,
            },
            context_dim: 128,
            film_zero_init: true,
            zero_output_head: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        if self.context_dim == 0 || self.context_dim % 2 != 0 {
            bail!(Config, "context dim must be positive and even");
        }
        if self.preset == Preset::Cddpm {
            self.encoder.validate(self.unet.image_size)?;
            if self.encoder.output_dim != self.context_dim {
                bail!(Config, "encoder output {} != context dim {}", self.encoder.output_dim, self.context_dim);
            }
        }
        Ok(())
    }
}

/// Two-layer perceptron with SiLU in between.
#[derive(Debug, Clone)]
pub struct Mlp {
    first: Linear,
    second: Linear,
    silu_input: bool,
}

impl Mlp {
    fn new(
        store: &mut ParamStore,
        name: &str,
        dims: (usize, usize, usize),
        zero_last: bool,
        silu_input: bool,
    ) -> Result<Self> {
        let first = Linear::new(store, &format!("{name}.fc1"), dims.0, dims.1)?;
        let second = if zero_last {
            Linear::zeroed(store, &format!("{name}.fc2"), dims.1, dims.2)?
        } else {
            Linear::new(store, &format!("{name}.fc2"), dims.1, dims.2)?
        };
        Ok(Self {
            first,
            second,
            silu_input,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = if self.silu_input { silu(x)? } else { x.clone() };
        let h = silu(&self.first.forward(&x)?)?;
        Ok(self.second.forward(&h)?)
    }
}

pub const ENCODER_PREFIX: &str = "encoder";
pub const TIME_PREFIX: &str = "time_mlp";
pub const FILM_PREFIX: &str = "film";
pub const UNET_PREFIX: &str = "unet";

/// The full denoiser; owns its parameters.
#[derive(Debug)]
pub struct DenoiserModel {
    config: ModelConfig,
    store: ParamStore,
    encoder: Option<ContextEncoder>,
    time_mlp: Mlp,
    film_mlps: Vec<Mlp>,
    unet: UNet,
}

impl DenoiserModel {
    pub fn new(config: ModelConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype, seed);
        let d = config.context_dim;
        let encoder = match config.preset {
            Preset::Cddpm => Some(ContextEncoder::new(&mut store, ENCODER_PREFIX, &config.encoder)?),
            Preset::Ddpm => None,
        };
        let time_mlp = Mlp::new(&mut store, TIME_PREFIX, (d, d, d), false, false)?;
        let film_mlps = config
            .unet
            .level_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                Mlp::new(
                    &mut store,
                    &format!("{FILM_PREFIX}.level{i}"),
                    (2 * d, 2 * d, 2 * c),
                    config.film_zero_init,
                    true,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let unet = UNet::new(&mut store, UNET_PREFIX, &config.unet, config.zero_output_head)?;
        Ok(Self {
            config,
            store,
            encoder,
            time_mlp,
            film_mlps,
            unet,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn encoder(&self) -> Option<&ContextEncoder> {
        self.encoder.as_ref()
    }

    /// Context vectors `(B, d)` for noise-free slices `(B, 1, H, W)`.
    /// The unconditioned preset returns zeros.
    pub fn encode(&self, x0: &Tensor) -> Result<Tensor> {
        let b = x0.dim(0)?;
        match &self.encoder {
            Some(enc) => enc.forward(x0),
            None => Ok(Tensor::zeros((b, self.config.context_dim), self.dtype(), &Device::Cpu)?),
        }
    }

    /// Time vectors `c_t`, `(B, d)`.
    pub fn time_vectors(&self, ts: &[usize]) -> Result<Tensor> {
        let emb = sinusoidal_tensor(ts, self.config.context_dim, self.dtype())?;
        self.time_mlp.forward(&emb)
    }

    /// Per-level modulation projections from the `(B, 2d)` condition.
    pub fn film_projections(&self, condition: &Tensor) -> Result<Vec<Tensor>> {
        self.film_mlps.iter().map(|m| m.forward(condition)).collect()
    }

    /// Predict x0 from `x_t` at steps `ts` given context `(B, d)`.
    pub fn forward(&self, x_t: &Tensor, ts: &[usize], context: &Tensor) -> Result<Tensor> {
        let b = x_t.dim(0)?;
        if ts.len() != b || context.dims() != [b, self.config.context_dim] {
            bail!(
                DimensionMismatch,
                "batch {b} with {} steps and context {:?}",
                ts.len(),
                context.dims()
            );
        }
        let (h, w) = self.config.unet.image_size;
        if x_t.dims() != [b, 1, h, w] {
            bail!(DimensionMismatch, "input {:?}, model expects (B, 1, {h}, {w})", x_t.dims());
        }
        let context = match self.config.preset {
            Preset::Cddpm => context.clone(),
            Preset::Ddpm => context.zeros_like()?,
        };
        let condition = Tensor::cat(&[&context, &self.time_vectors(ts)?], 1)?;
        let films = self.film_projections(&condition)?;
        self.unet.forward(x_t, Some(&films))
    }

    /// Encode `x0` for context, then predict.
    pub fn reconstruct(&self, x_t: &Tensor, ts: &[usize], x0: &Tensor) -> Result<Tensor> {
        let c = self.encode(x0)?;
        self.forward(x_t, ts, &c)
    }

    /// The U-Net alone with every modulation skipped.
    pub fn forward_unconditioned(&self, x_t: &Tensor) -> Result<Tensor> {
        self.unet.forward(x_t, None)
    }

    /// Parameters of the bare U-Net, the encoder, MLP I and all level MLPs.
    pub fn parameter_breakdown(&self) -> ParameterBreakdown {
        ParameterBreakdown {
            unet: self.store.count_with_prefix(UNET_PREFIX),
            encoder: self.store.count_with_prefix(ENCODER_PREFIX),
            time_mlp: self.store.count_with_prefix(TIME_PREFIX),
            film_mlps: self.store.count_with_prefix(FILM_PREFIX),
            total: self.store.count(),
        }
    }

    /// Copy encoder weights from another store (e.g. a pre-trained encoder).
    pub fn load_encoder(&self, weights: &[(String, Tensor)]) -> Result<()> {
        if self.encoder.is_none() {
            bail!(Config, "the ddpm preset has no encoder");
        }
        let ours: Vec<&(String, candle_core::Var)> = self
            .store
            .entries()
            .iter()
            .filter(|(n, _)| n.starts_with(ENCODER_PREFIX))
            .collect();
        if ours.len() != weights.len() {
            bail!(IncompatibleCheckpoint, "encoder has {} tensors, got {}", ours.len(), weights.len());
        }
        for ((name, var), (wname, t)) in ours.into_iter().zip(weights) {
            if name != wname || var.dims() != t.dims() {
                bail!(IncompatibleCheckpoint, "{wname} does not match {name}");
            }
            var.set(&t.to_dtype(self.dtype())?)?;
        }
        Ok(())
    }

    /// Single-slice helper: context vector of a noise-free slice.
    pub fn encode_context(&self, x0: &Slice) -> Result<ContextVector> {
        let t = slice_tensor(x0, self.dtype())?;
        let c: Vec<f64> = self.encode(&t)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        ContextVector::new(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParameterBreakdown {
    pub unet: usize,
    pub encoder: usize,
    pub time_mlp: usize,
    pub film_mlps: usize,
    pub total: usize,
}

/// `(1, 1, H, W)` tensor from a slice.
pub fn slice_tensor(s: &Slice, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(s.pixels.clone(), (1, 1, s.h, s.w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// `(B, 1, H, W)` tensor from equally sized pixel buffers.
pub fn batch_tensor(images: &[&[f64]], (h, w): (usize, usize), dtype: DType) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if img.len() != h * w {
            bail!(DimensionMismatch, "image of {} pixels, expected {}", img.len(), h * w);
        }
        data.extend_from_slice(img);
    }
    Ok(Tensor::from_vec(data, (images.len(), 1, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Split a `(B, 1, H, W)` tensor into per-image f64 buffers.
pub fn tensor_images(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    let (b, _, h, w) = t.dims4()?;
    let flat: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    Ok(flat.chunks(h * w).take(b).map(|c| c.to_vec()).collect())
}
