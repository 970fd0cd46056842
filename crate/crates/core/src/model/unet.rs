//! Denoising U-Net whose residual blocks are modulated per level.

use candle_core::{Module, Tensor};

use super::layers::{group_norm, Conv2d, GroupNorm};
use super::ops::upsample2x;
use super::params::ParamStore;
use crate::error::{bail, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct UNetConfig {
    /// Channels per resolution level; level `i` runs at `size / 2^i`.
    pub level_channels: Vec<usize>,
    pub groups: usize,
    pub image_size: (usize, usize),
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.level_channels.len() < 2 {
            bail!(Config, "U-Net needs at least 2 levels");
        }
        if self.level_channels.contains(&0) || self.groups == 0 {
            bail!(Config, "channels and group count must be positive");
        }
        for &c in &self.level_channels {
            if c % self.groups != 0 {
                bail!(Config, "group count {} does not divide {c} channels", self.groups);
            }
        }
        let f = 1 << (self.level_channels.len() - 1);
        let (h, w) = self.image_size;
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            bail!(Config, "image {h}x{w} not divisible by {f}");
        }
        Ok(())
    }
}

/// norm → SiLU → conv1 → norm → FiLM → SiLU → conv2, plus a skip path.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
    pub level: usize,
}

impl ResBlock {
    fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        groups: usize,
        level: usize,
    ) -> Result<Self> {
        let in_groups = if c_in % groups == 0 { groups } else { 1 };
        Ok(Self {
            norm1: group_norm(store, &format!("{name}.norm1"), in_groups, c_in)?,
            conv1: Conv2d::new(store, &format!("{name}.conv1"), c_in, c_out, 3, 1)?,
            norm2: group_norm(store, &format!("{name}.norm2"), groups, c_out)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), c_out, c_out, 3, 1)?,
            skip: if c_in != c_out {
                Some(Conv2d::new(store, &format!("{name}.skip"), c_in, c_out, 1, 1)?)
            } else {
                None
            },
            level,
        })
    }

    /// `film` is the `(B, 2C)` projection for this block's level, or `None`
    /// to run without modulation.
    fn forward(&self, x: &Tensor, film: Option<&Tensor>) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward_silu(x, None)?)?;
        let h = self.conv2.forward(&self.norm2.forward_silu(&h, film)?)?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?)
    }
}

#[derive(Debug, Clone)]
pub struct UNet {
    conv_in: Conv2d,
    down: Vec<ResBlock>,
    mid: ResBlock,
    up: Vec<ResBlock>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl UNet {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &UNetConfig, zero_head: bool) -> Result<Self> {
        cfg.validate()?;
        let ch = &cfg.level_channels;
        let levels = ch.len();
        let conv_in = Conv2d::new(store, &format!("{prefix}.conv_in"), 1, ch[0], 3, 1)?;
        let mut down = Vec::with_capacity(levels);
        let mut prev = ch[0];
        for (i, &c) in ch.iter().enumerate() {
            down.push(ResBlock::new(store, &format!("{prefix}.down{i}"), prev, c, cfg.groups, i)?);
            prev = c;
        }
        let mid = ResBlock::new(store, &format!("{prefix}.mid"), prev, prev, cfg.groups, levels - 1)?;
        let mut up = Vec::with_capacity(levels);
        for i in (0..levels).rev() {
            up.push(ResBlock::new(
                store,
                &format!("{prefix}.up{i}"),
                prev + ch[i],
                ch[i],
                cfg.groups,
                i,
            )?);
            prev = ch[i];
        }
        let norm_out = group_norm(store, &format!("{prefix}.norm_out"), cfg.groups, ch[0])?;
        let conv_out = if zero_head {
            Conv2d::zeroed(store, &format!("{prefix}.conv_out"), ch[0], 1, 3)?
        } else {
            Conv2d::new(store, &format!("{prefix}.conv_out"), ch[0], 1, 3, 1)?
        };
        Ok(Self {
            conv_in,
            down,
            mid,
            up,
            norm_out,
            conv_out,
        })
    }

    /// `x` is `(B, 1, H, W)`; `films[i]` is the `(B, 2·C_i)` projection of level `i`.
    pub fn forward(&self, x: &Tensor, films: Option<&[Tensor]>) -> Result<Tensor> {
        let film = |level: usize| films.map(|f| &f[level]);
        let levels = self.down.len();
        let mut h = self.conv_in.forward(x)?;
        let mut skips = Vec::with_capacity(levels);
        for (i, block) in self.down.iter().enumerate() {
            h = block.forward(&h, film(i))?;
            skips.push(h.clone());
            if i + 1 < levels {
                h = h.avg_pool2d(2)?;
            }
        }
        h = self.mid.forward(&h, film(levels - 1))?;
        for block in &self.up {
            let skip = skips.pop().expect("one skip per level");
            h = Tensor::cat(&[&h, &skip], 1)?;
            h = block.forward(&h, film(block.level))?;
            if block.level > 0 {
                h = upsample2x(&h)?;
            }
        }
        let h = self.norm_out.forward_silu(&h, None)?;
        Ok(self.conv_out.forward(&h)?)
    }
}
