//! Binary checkpoint container.
//!
//! Layout (little endian):
//! `"CDCK"`, u32 version, u32 metadata length, UTF-8 `key=value` lines,
//! u32 tensor count, then per tensor: u16 name length, name, u8 dtype
//! (0 = f32, 1 = f64), u8 rank, rank × u32 dims, raw values.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use super::encoder::EncoderConfig;
use super::unet::UNetConfig;
use super::{DenoiserModel, ModelConfig, Preset};
use crate::error::{bail, Error, Result};

const MAGIC: &[u8; 4] = b"CDCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta: String = self.meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let flat = t.flatten_all()?;
            match t.dtype() {
                DType::F32 => out.push(0),
                DType::F64 => out.push(1),
                other => bail!(Format, "unsupported dtype {other:?}"),
            }
            out.push(t.rank() as u8);
            for &d in t.dims() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match t.dtype() {
                DType::F32 => {
                    for v in flat.to_vec1::<f32>()? {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                _ => {
                    for v in flat.to_vec1::<f64>()? {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            bail!(Format, "not a checkpoint");
        }
        let version = r.u32()?;
        if version != VERSION {
            bail!(Format, "unsupported checkpoint version {version}");
        }
        let meta_len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|e| Error::Format(format!("metadata is not UTF-8: {e}")))?;
        let meta = text
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|e| Error::Format(format!("tensor name: {e}")))?;
            let dtype = r.take(1)?[0];
            let rank = r.take(1)?[0] as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = dims.iter().product();
            let t = match dtype {
                0 => {
                    let raw = r.take(4 * count)?;
                    let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                    Tensor::from_vec(v, dims, &Device::Cpu)?
                }
                1 => {
                    let raw = r.take(8 * count)?;
                    let v: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    Tensor::from_vec(v, dims, &Device::Cpu)?
                }
                other => bail!(Format, "unknown dtype tag {other}"),
            };
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            bail!(Format, "{} trailing bytes", bytes.len() - r.pos);
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::IncompatibleCheckpoint(format!("missing metadata key {key}")))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            bail!(Format, "truncated checkpoint");
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn list(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| Error::IncompatibleCheckpoint(format!("bad list '{s}'")))
        })
        .collect()
}

pub fn model_config_meta(cfg: &ModelConfig) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("model.preset".into(), cfg.preset.name().into());
    m.insert("model.level_channels".into(), list(&cfg.unet.level_channels));
    m.insert("model.groups".into(), cfg.unet.groups.to_string());
    m.insert(
        "model.image_size".into(),
        list(&[cfg.unet.image_size.0, cfg.unet.image_size.1]),
    );
    m.insert("model.encoder_channels".into(), list(&cfg.encoder.stage_channels));
    m.insert("model.context_dim".into(), cfg.context_dim.to_string());
    m.insert("model.film_zero_init".into(), cfg.film_zero_init.to_string());
    m.insert("model.zero_output_head".into(), cfg.zero_output_head.to_string());
    m
}

pub fn model_config_from_meta(meta: &BTreeMap<String, String>) -> Result<ModelConfig> {
    let get = |k: &str| {
        meta.get(k)
            .map(String::as_str)
            .ok_or_else(|| Error::IncompatibleCheckpoint(format!("missing metadata key {k}")))
    };
    let parse_usize = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::IncompatibleCheckpoint(format!("bad value for {k}")))
    };
    let parse_bool = |k: &str| -> Result<bool> {
        get(k)?
            .parse()
            .map_err(|_| Error::IncompatibleCheckpoint(format!("bad value for {k}")))
    };
    let size = parse_list(get("model.image_size")?)?;
    if size.len() != 2 {
        bail!(IncompatibleCheckpoint, "image size needs two entries");
    }
    let context_dim = parse_usize("model.context_dim")?;
    Ok(ModelConfig {
        preset: get("model.preset")?.parse::<Preset>()?,
        unet: UNetConfig {
            level_channels: parse_list(get("model.level_channels")?)?,
            groups: parse_usize("model.groups")?,
            image_size: (size[0], size[1]),
        },
        encoder: EncoderConfig {
            stage_channels: parse_list(get("model.encoder_channels")?)?,
            output_dim: context_dim,
        },
        context_dim,
        film_zero_init: parse_bool("model.film_zero_init")?,
        zero_output_head: parse_bool("model.zero_output_head")?,
    })
}

fn dtype_name(d: DType) -> &'static str {
    if d == DType::F64 {
        "f64"
    } else {
        "f32"
    }
}

impl DenoiserModel {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut meta = model_config_meta(self.config());
        meta.insert("kind".into(), "model".into());
        meta.insert("dtype".into(), dtype_name(self.dtype()).into());
        Ok(Checkpoint {
            meta,
            tensors: self.store().snapshot()?,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta("kind")? != "model" {
            bail!(IncompatibleCheckpoint, "not a model checkpoint");
        }
        let cfg = model_config_from_meta(&ckpt.meta)?;
        let dtype = if ckpt.meta("dtype")? == "f64" { DType::F64 } else { DType::F32 };
        let model = DenoiserModel::new(cfg, dtype, 0)?;
        model.store().restore(&ckpt.tensors)?;
        Ok(model)
    }

    /// Check that the checkpoint's architecture equals `expected`.
    pub fn from_checkpoint_expecting(ckpt: &Checkpoint, expected: &ModelConfig) -> Result<Self> {
        let cfg = model_config_from_meta(&ckpt.meta)?;
        if &cfg != expected {
            bail!(
                IncompatibleCheckpoint,
                "checkpoint architecture {cfg:?} differs from configured {expected:?}"
            );
        }
        Self::from_checkpoint(ckpt)
    }
}

/// Encoder-only checkpoint written by masked pre-training.
pub fn encoder_checkpoint(cfg: &EncoderConfig, tensors: Vec<(String, Tensor)>) -> Checkpoint {
    let mut meta = BTreeMap::new();
    meta.insert("kind".into(), "encoder".into());
    meta.insert("model.encoder_channels".into(), list(&cfg.stage_channels));
    meta.insert("model.context_dim".into(), cfg.output_dim.to_string());
    Checkpoint { meta, tensors }
}

pub fn encoder_weights(ckpt: &Checkpoint, expected: &EncoderConfig) -> Result<Vec<(String, Tensor)>> {
    if ckpt.meta("kind")? != "encoder" {
        bail!(IncompatibleCheckpoint, "not an encoder checkpoint");
    }
    let channels = parse_list(ckpt.meta("model.encoder_channels")?)?;
    let dim: usize = ckpt
        .meta("model.context_dim")?
        .parse()
        .map_err(|_| Error::IncompatibleCheckpoint("bad context dim".into()))?;
    if channels != expected.stage_channels || dim != expected.output_dim {
        bail!(IncompatibleCheckpoint, "encoder shape differs from configuration");
    }
    Ok(ckpt.tensors.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            preset: Preset::Cddpm,
            unet: UNetConfig {
                level_channels: vec![4, 8],
                groups: 2,
                image_size: (16, 16),
            },
            encoder: EncoderConfig {
                stage_channels: vec![2, 2, 4, 4],
                output_dim: 4,
            },
            context_dim: 4,
            film_zero_init: false,
            zero_output_head: false,
        }
    }

    #[test]
    fn model_round_trips_bit_exactly() {
        for dtype in [DType::F32, DType::F64] {
            let m = DenoiserModel::new(tiny(), dtype, 3).unwrap();
            let bytes = m.to_checkpoint().unwrap().to_bytes().unwrap();
            let back = DenoiserModel::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
            assert_eq!(back.config(), m.config());
            assert_eq!(back.dtype(), dtype);
            let again = back.to_checkpoint().unwrap().to_bytes().unwrap();
            assert_eq!(bytes, again);
        }
    }

    #[test]
    fn truncated_and_foreign_bytes_are_rejected() {
        let m = DenoiserModel::new(tiny(), DType::F32, 3).unwrap();
        let bytes = m.to_checkpoint().unwrap().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"CDV1").is_err());
    }

    #[test]
    fn architecture_mismatch_is_incompatible() {
        let m = DenoiserModel::new(tiny(), DType::F32, 3).unwrap();
        let ckpt = m.to_checkpoint().unwrap();
        let mut other = tiny();
        other.unet.level_channels = vec![4, 4];
        assert!(matches!(
            DenoiserModel::from_checkpoint_expecting(&ckpt, &other),
            Err(Error::IncompatibleCheckpoint(_))
        ));
    }
}
