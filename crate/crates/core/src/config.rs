//! Experiment configuration: flat `section.key = value` lines (a subset of
//! TOML, so `[section]` tables are accepted too) whose every field has a
//! default, resolved into the typed configurations used by the library.
//! The effective configuration is written next to every run's outputs and
//! its hash identifies the run.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentKind;
use crate::diffusion::NoiseConfig;
use crate::error::{bail, Error, Result};
use crate::model::encoder::EncoderConfig;
use crate::model::unet::UNetConfig;
use crate::model::{ModelConfig, Preset};
use crate::noise::SimplexParams;
use crate::phantom::{DatasetSpec, PhantomSpec};
use crate::pipeline::PostProcConfig;
use crate::pretrain::PretrainConfig;
use crate::schedule::{linear_schedule, NoiseSchedule};
use crate::train::TrainConfig;
use crate::volume::Dims;

/// How the context encoder starts training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderInit {
    Scratch,
    Pretrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// `ddpm` or `cddpm`.
    pub preset: String,
    pub seed: u64,
    /// `scratch` or `pretrained`.
    pub encoder_init: String,
    /// Inference noise levels; more than one averages the reconstructions.
    pub t_test: Vec<usize>,
    /// `f32` or `f64`.
    pub dtype: String,
    pub schedule: ScheduleSection,
    pub noise: NoiseSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub pretrain: PretrainSection,
    pub postproc: PostprocSection,
    pub evaluation: EvaluationSection,
    /// Progress output on stderr; not part of the configuration echo.
    #[serde(skip)]
    pub verbose: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    /// Number of diffusion steps.
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    /// `simplex` or `gaussian`.
    pub kind: String,
    pub octaves: usize,
    pub persistence: f64,
    pub frequency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Seed of the synthetic subjects, independent of the run seed so that
    /// runs with different seeds see the same data.
    pub seed: u64,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub healthy_train: usize,
    pub healthy_val: usize,
    pub healthy_test: usize,
    pub unhealthy_val: usize,
    pub unhealthy_test: usize,
    pub max_anomalies: usize,
    pub anomaly_radius: [f64; 2],
    pub anomaly_offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub unet_channels: Vec<usize>,
    pub groups: usize,
    pub encoder_channels: Vec<usize>,
    pub context_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub val_every: usize,
    /// Augmentations as `name:probability` entries.
    pub augmentations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub mask_ratio: f64,
    pub patch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostprocSection {
    pub median_filter: bool,
    pub brain_erosion: bool,
    pub component_filter: bool,
    pub median_kernel: usize,
    pub erosion_iterations: usize,
    pub min_component_size: usize,
    /// `6` or `26`.
    pub connectivity: String,
    pub grid_size: usize,
    pub grid_low: f64,
    pub grid_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    /// Noise levels of the sweep in the report.
    pub sweep_levels: Vec<usize>,
    /// Gray-value exponents of the contrast study.
    pub contrast_levels: Vec<f64>,
    pub permutation_rounds: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Cddpm.name().into(),
            seed: 0,
            encoder_init: "scratch".into(),
            t_test: vec![500],
            dtype: "f32".into(),
            schedule: ScheduleSection::default(),
            noise: NoiseSection::default(),
            data: DataSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            pretrain: PretrainSection::default(),
            postproc: PostprocSection::default(),
            evaluation: EvaluationSection::default(),
            verbose: false,
        }
    }
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

impl Default for NoiseSection {
    fn default() -> Self {
        let p = SimplexParams::default();
        Self {
            kind: "simplex".into(),
            octaves: p.octaves,
            persistence: p.persistence,
            frequency: p.frequency,
        }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        let s = DatasetSpec::default();
        Self {
            seed: 0,
            depth: s.phantom.dims.d,
            height: s.phantom.dims.h,
            width: s.phantom.dims.w,
            healthy_train: s.healthy_train,
            healthy_val: s.healthy_val,
            healthy_test: s.healthy_test,
            unhealthy_val: s.unhealthy_val,
            unhealthy_test: s.unhealthy_test,
            max_anomalies: s.max_anomalies,
            anomaly_radius: [s.phantom.anomaly_radius.0, s.phantom.anomaly_radius.1],
            anomaly_offset: s.phantom.anomaly_offset,
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::desk(Preset::Cddpm);
        Self {
            unet_channels: m.unet.level_channels,
            groups: m.unet.groups,
            encoder_channels: m.encoder.stage_channels,
            context_dim: m.context_dim,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            steps: t.steps,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            val_every: t.val_every,
            augmentations: t.augmentations.iter().map(|(k, p)| format!("{}:{p}", k.name())).collect(),
        }
    }
}

impl Default for PretrainSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        Self {
            steps: p.steps,
            batch_size: p.batch_size,
            learning_rate: p.learning_rate,
            mask_ratio: p.mask_ratio,
            patch: p.patch,
        }
    }
}

impl Default for PostprocSection {
    fn default() -> Self {
        let p = PostProcConfig::default();
        Self {
            median_filter: p.median_filter,
            brain_erosion: p.brain_erosion,
            component_filter: p.component_filter,
            median_kernel: p.median_kernel,
            erosion_iterations: p.erosion_iterations,
            min_component_size: p.min_component_size,
            connectivity: p.connectivity.name().into(),
            grid_size: p.grid_size,
            grid_low: p.grid_low,
            grid_high: p.grid_high,
        }
    }
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            sweep_levels: vec![100, 250, 500, 750, 900],
            contrast_levels: vec![0.5, 1.0, 2.0],
            permutation_rounds: 10_000,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// The effective configuration as flat `section.key = value` lines,
    /// every field spelled out.
    pub fn to_text(&self) -> String {
        let value = toml::Value::try_from(self).expect("configuration is always serializable");
        let mut out = String::new();
        flatten("", &value, &mut out);
        out
    }

    /// SHA-256 of [`Self::to_text`], hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Full-scale settings: 96×96 slices, wide networks, learning rate
    /// 1e-5, batch 32 and 1600 epochs of validation cadence.
    pub fn full_scale() -> Self {
        let m = ModelConfig::full(Preset::Cddpm);
        let mut cfg = Self::default();
        cfg.data.depth = 50;
        cfg.data.height = m.unet.image_size.0;
        cfg.data.width = m.unet.image_size.1;
        cfg.data.anomaly_radius = [3.0, 8.0];
        cfg.model = ModelSection {
            unet_channels: m.unet.level_channels,
            groups: m.unet.groups,
            encoder_channels: m.encoder.stage_channels,
            context_dim: m.context_dim,
        };
        cfg.train.learning_rate = 1e-5;
        cfg.train.batch_size = 32;
        cfg.train.val_every = 100;
        cfg.train.steps = 1600 * cfg.train.val_every;
        cfg
    }

    /// Check that every section resolves.
    pub fn validate(&self) -> Result<()> {
        self.preset()?;
        self.encoder_init()?;
        self.dtype()?;
        let schedule = self.schedule()?;
        if self.t_test.is_empty() {
            bail!(Config, "t_test must list at least one level");
        }
        if let Some(t) = self.t_test.iter().chain(&self.evaluation.sweep_levels).find(|&&t| t == 0 || t > schedule.steps()) {
            bail!(Config, "noise level {t} outside [1, {}]", schedule.steps());
        }
        self.noise_config()?;
        self.dataset_spec()?.phantom.validate()?;
        self.model_config()?.validate()?;
        self.train_config()?.validate()?;
        self.pretrain_config();
        self.postproc()?.validate()?;
        if self.evaluation.permutation_rounds == 0 {
            bail!(Config, "permutation_rounds must be positive");
        }
        if self.evaluation.contrast_levels.iter().any(|c| !(*c > 0.0)) {
            bail!(Config, "contrast levels must be positive");
        }
        Ok(())
    }

    pub fn preset(&self) -> Result<Preset> {
        self.preset.parse()
    }

    pub fn encoder_init(&self) -> Result<EncoderInit> {
        match self.encoder_init.as_str() {
            "scratch" => Ok(EncoderInit::Scratch),
            "pretrained" => Ok(EncoderInit::Pretrained),
            other => Err(Error::Unknown {
                kind: "encoder init",
                name: other.into(),
            }),
        }
    }

    pub fn dtype(&self) -> Result<candle_core::DType> {
        match self.dtype.as_str() {
            "f32" => Ok(candle_core::DType::F32),
            "f64" => Ok(candle_core::DType::F64),
            other => Err(Error::Unknown {
                kind: "dtype",
                name: other.into(),
            }),
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let s = &self.schedule;
        linear_schedule(s.steps, s.beta_start, s.beta_end)
    }

    pub fn noise_config(&self) -> Result<NoiseConfig> {
        let n = &self.noise;
        if n.octaves == 0 || !(n.frequency > 0.0) || !(n.persistence > 0.0) {
            bail!(Config, "simplex noise needs octaves, frequency and persistence > 0");
        }
        Ok(NoiseConfig {
            kind: n.kind.parse()?,
            simplex: SimplexParams {
                octaves: n.octaves,
                persistence: n.persistence,
                frequency: n.frequency,
            },
        })
    }

    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        let d = &self.data;
        // The default phantom geometry is laid out for its own dims; other
        // sizes scale it proportionally.
        let base = PhantomSpec::default();
        let fz = d.depth as f64 / base.dims.d as f64;
        let fxy = d.height.min(d.width) as f64 / base.dims.h.min(base.dims.w) as f64;
        let phantom = PhantomSpec {
            dims: Dims::new(d.depth, d.height, d.width)?,
            axis_xy: (base.axis_xy.0 * fxy, base.axis_xy.1 * fxy),
            axis_z: (base.axis_z.0 * fz, base.axis_z.1 * fz),
            texture_scale: base.texture_scale * fxy,
            anomaly_radius: (d.anomaly_radius[0], d.anomaly_radius[1]),
            anomaly_offset: d.anomaly_offset,
            ..base
        };
        Ok(DatasetSpec {
            phantom,
            healthy_train: d.healthy_train,
            healthy_val: d.healthy_val,
            healthy_test: d.healthy_test,
            unhealthy_val: d.unhealthy_val,
            unhealthy_test: d.unhealthy_test,
            max_anomalies: d.max_anomalies,
        })
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let preset = self.preset()?;
        Ok(ModelConfig {
            unet: UNetConfig {
                level_channels: m.unet_channels.clone(),
                groups: m.groups,
                image_size: (self.data.height, self.data.width),
            },
            encoder: EncoderConfig {
                stage_channels: m.encoder_channels.clone(),
                output_dim: m.context_dim,
            },
            context_dim: m.context_dim,
            ..ModelConfig::desk(preset)
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let augmentations = t
            .augmentations
            .iter()
            .map(|entry| {
                let (name, p) = entry
                    .split_once(':')
                    .ok_or_else(|| Error::Config(format!("augmentation '{entry}' is not name:probability")))?;
                let kind: AugmentKind = name.trim().parse()?;
                let p: f64 = p
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad probability in '{entry}'")))?;
                if !(0.0..=1.0).contains(&p) {
                    bail!(Config, "probability in '{entry}' outside [0, 1]");
                }
                Ok((kind, p))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainConfig {
            steps: t.steps,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            val_every: t.val_every,
            augmentations,
            noise: self.noise_config()?,
            seed: self.seed,
            verbose: self.verbose,
        })
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let p = &self.pretrain;
        PretrainConfig {
            steps: p.steps,
            batch_size: p.batch_size,
            learning_rate: p.learning_rate,
            mask_ratio: p.mask_ratio,
            patch: p.patch,
            seed: self.seed,
            verbose: self.verbose,
        }
    }

    pub fn postproc(&self) -> Result<PostProcConfig> {
        let p = &self.postproc;
        Ok(PostProcConfig {
            median_kernel: p.median_kernel,
            erosion_iterations: p.erosion_iterations,
            min_component_size: p.min_component_size,
            connectivity: p.connectivity.parse()?,
            grid_size: p.grid_size,
            grid_low: p.grid_low,
            grid_high: p.grid_high,
            median_filter: p.median_filter,
            brain_erosion: p.brain_erosion,
            component_filter: p.component_filter,
        })
    }
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut String) {
    match value {
        toml::Value::Table(t) => {
            // Scalars first so that the top-level keys precede every section.
            let (tables, scalars): (Vec<_>, Vec<_>) = t.iter().partition(|(_, v)| v.is_table());
            for (k, v) in scalars.into_iter().chain(tables) {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => out.push_str(&format!("{prefix} = {other}\n")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_toml(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
        assert_eq!(cfg.train_config().unwrap().augmentations, crate::train::default_augmentations());
        let text = cfg.to_text();
        assert!(text.contains("\nschedule.T = 1000\n"), "{text}");
        assert!(text.lines().all(|l| !l.starts_with('[')));
        assert!(text.starts_with("dtype = "));
    }

    #[test]
    fn full_scale_validates() {
        let cfg = ExperimentConfig::full_scale();
        cfg.validate().unwrap();
        assert_eq!(cfg.model_config().unwrap().context_dim, 128);
        assert_eq!(cfg.train.learning_rate, 1e-5);
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg = ExperimentConfig::from_toml("preset = \"ddpm\"\nt_test = [250, 500, 750]\ntrain.steps = 7\n[schedule]\nT = 1000\n").unwrap();
        assert_eq!(cfg.preset().unwrap(), Preset::Ddpm);
        assert_eq!(cfg.t_test, vec![250, 500, 750]);
        assert_eq!(cfg.train.steps, 7);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
        assert_ne!(cfg.hash(), ExperimentConfig::default().hash());
    }

    #[test]
    fn invalid_documents_are_rejected() {
        for bad in [
            "preset = \"unet\"",
            "t_test = []",
            "t_test = [1001]",
            "bogus = 1",
            "[postproc]\nmedian_kernel = 4",
            "[noise]\nkind = \"perlin\"",
            "[train]\naugmentations = [\"blur\"]",
            "encoder_init = \"warm\"",
        ] {
            assert!(ExperimentConfig::from_toml(bad).is_err(), "{bad}");
        }
    }
}
