//! Parameterized building blocks backed by the [`ParamStore`].

use candle_core::{Module, Tensor};

use super::ops;
use super::params::ParamStore;
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((c_in * kernel * kernel) as f64).sqrt();
        let weight = store.uniform(&format!("{name}.weight"), &[c_out, c_in, kernel, kernel], bound)?;
        let bias = store.uniform(&format!("{name}.bias"), &[c_out], bound)?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn zeroed(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
    ) -> Result<Self> {
        let weight = store.constant(&format!("{name}.weight"), &[c_out, c_in, kernel, kernel], 0.0)?;
        let bias = store.constant(&format!("{name}.bias"), &[c_out], 0.0)?;
        Ok(Self {
            weight,
            bias,
            stride: 1,
            padding: kernel / 2,
        })
    }
}

impl Module for Conv2d {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        ops::conv2d(xs, &self.weight, &self.bias, self.stride, self.padding)
    }
}

/// Transposed convolution with kernel size equal to the stride.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
}

impl ConvTranspose2d {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        let bound = 1.0 / ((c_out * stride * stride) as f64).sqrt();
        let weight = store.uniform(&format!("{name}.weight"), &[c_in, c_out, stride, stride], bound)?;
        let bias = store.uniform(&format!("{name}.bias"), &[c_out], bound)?;
        Ok(Self { weight, bias, stride })
    }
}

impl Module for ConvTranspose2d {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let c = self.bias.dim(0)?;
        xs.conv_transpose2d(&self.weight, 0, 0, self.stride, 1)?
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        Ok(Self {
            weight: store.uniform(&format!("{name}.weight"), &[d_out, d_in], bound)?,
            bias: store.uniform(&format!("{name}.bias"), &[d_out], bound)?,
        })
    }

    pub fn zeroed(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: store.constant(&format!("{name}.weight"), &[d_out, d_in], 0.0)?,
            bias: store.constant(&format!("{name}.bias"), &[d_out], 0.0)?,
        })
    }
}

impl Module for Linear {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        xs.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    weight: Tensor,
    bias: Tensor,
    groups: usize,
}

impl GroupNorm {
    /// `silu(norm(x))`, with the feature-wise modulation `(B, 2C)` applied
    /// between the normalization and the activation when given.
    pub fn forward_silu(&self, xs: &Tensor, film: Option<&Tensor>) -> candle_core::Result<Tensor> {
        let (b, c) = (xs.dim(0)?, xs.dim(1)?);
        let weight = self.weight.reshape((1, c))?;
        let bias = self.bias.reshape((1, c))?;
        let (scale, shift) = match film {
            Some(p) => {
                if p.dims() != [b, 2 * c] {
                    return Err(candle_core::Error::Msg(format!(
                        "modulation {:?} for features {:?}",
                        p.dims(),
                        xs.dims()
                    )));
                }
                let gain = (p.narrow(1, 0, c)? + 1.0)?;
                let shift = gain.broadcast_mul(&bias)?.add(&p.narrow(1, c, c)?)?;
                (gain.broadcast_mul(&weight)?, shift)
            }
            None => (weight.broadcast_as((b, c))?, bias.broadcast_as((b, c))?),
        };
        ops::group_norm_silu(xs, self.groups, 1e-5, &scale, &shift)
    }
}

pub fn group_norm(store: &mut ParamStore, name: &str, groups: usize, channels: usize) -> Result<GroupNorm> {
    Ok(GroupNorm {
        weight: store.constant(&format!("{name}.weight"), &[channels], 1.0)?,
        bias: store.constant(&format!("{name}.bias"), &[channels], 0.0)?,
        groups: groups.min(channels),
    })
}

pub fn silu(xs: &Tensor) -> candle_core::Result<Tensor> {
    ops::silu(xs)
}
