//! Denoiser training: Adam on the reconstruction loss over augmented
//! healthy slices, periodic validation and best-checkpoint selection.

use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::Rng;

use crate::augment::{augment_all, AugmentKind};
use crate::diffusion::{diffuse_batch, l1_loss, mix, NoiseConfig};
use crate::error::{bail, Error, Result};
use crate::model::{batch_tensor, DenoiserModel};
use crate::phantom::Subject;
use crate::schedule::NoiseSchedule;
use crate::seed;
use crate::volume::extract_slices;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Validate every this many steps (one "epoch"); the final step is
    /// always validated.
    pub val_every: usize,
    pub augmentations: Vec<(AugmentKind, f64)>,
    pub noise: NoiseConfig,
    pub seed: u64,
    /// Print progress lines to stderr.
    pub verbose: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 8,
            learning_rate: 1e-3,
            val_every: 100,
            augmentations: default_augmentations(),
            noise: NoiseConfig::default(),
            seed: 0,
            verbose: false,
        }
    }
}

/// Blur and bias at 0.25, gamma and ghosting at 0.5.
pub fn default_augmentations() -> Vec<(AugmentKind, f64)> {
    vec![
        (AugmentKind::Blur, 0.25),
        (AugmentKind::Bias, 0.25),
        (AugmentKind::Gamma, 0.5),
        (AugmentKind::Ghosting, 0.5),
    ]
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.val_every == 0 {
            bail!(Config, "steps, batch size and validation interval must be positive");
        }
        if !(self.learning_rate > 0.0) {
            bail!(Config, "learning rate must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogEntry {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub log: Vec<LogEntry>,
    pub best_step: usize,
    pub best_val_loss: f64,
}

impl TrainReport {
    /// `step,train_loss,val_loss` lines.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,train_loss,val_loss\n");
        for e in &self.log {
            let v = e.val_loss.map(|v| format!("{v:.6}")).unwrap_or_default();
            s.push_str(&format!("{},{:.6},{}\n", e.step, e.train_loss, v));
        }
        s
    }
}

/// Train `model` in place and leave it holding the weights with the lowest
/// validation loss.
pub fn train(
    model: &DenoiserModel,
    train_set: &[&Subject],
    val_set: &[&Subject],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        bail!(InvalidArgument, "training and validation sets must be non-empty");
    }
    let (h, w) = model.config().unet.image_size;
    for s in train_set.iter().chain(val_set) {
        let d = s.volume.dims();
        if (d.h, d.w) != (h, w) {
            bail!(DimensionMismatch, "subject {} has slices {}x{}, model expects {h}x{w}", s.id, d.h, d.w);
        }
    }
    let mut opt = AdamW::new(
        model.store().vars(),
        ParamsAdamW {
            lr: cfg.learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        },
    )?;
    let val = ValidationSet::new(val_set, schedule, cfg)?;
    let mut rng = seed::rng(cfg.seed, &[seed::label("train-batches")]);
    let mut log = Vec::new();
    let mut best: Option<(usize, f64, Vec<(String, candle_core::Tensor)>)> = None;
    let mut running = 0.0;
    let mut running_n = 0usize;

    for step in 1..=cfg.steps {
        let mut images = Vec::with_capacity(cfg.batch_size);
        let mut ts = Vec::with_capacity(cfg.batch_size);
        let mut noises = Vec::with_capacity(cfg.batch_size);
        for b in 0..cfg.batch_size {
            let subject = train_set[rng.random_range(0..train_set.len())];
            let depth = subject.volume.dims().d;
            let z = rng.random_range(0..depth);
            let t = rng.random_range(1..=schedule.steps());
            let sample_seed = seed::derive(cfg.seed, &[seed::label("sample"), step as u64, b as u64]);
            let augmented = augment_all(&subject.volume, &cfg.augmentations, sample_seed)?;
            images.push(augmented.slice(z)?.pixels);
            ts.push(t);
            noises.push(cfg.noise.sample((h, w), seed::derive(sample_seed, &[seed::label("noise")]))?);
        }
        let refs: Vec<&[f64]> = images.iter().map(Vec::as_slice).collect();
        let x0 = batch_tensor(&refs, (h, w), model.dtype())?;
        let x_t = diffuse_batch(&refs, &ts, &noises, schedule, (h, w), model.dtype())?;
        let rec = model.reconstruct(&x_t, &ts, &x0)?;
        let loss = l1_loss(&x0, &rec)?;
        let loss_value: f64 = loss.to_dtype(candle_core::DType::F64)?.to_scalar()?;
        if !loss_value.is_finite() {
            return Err(Error::Diverged { step });
        }
        opt.backward_step(&loss)?;
        running += loss_value;
        running_n += 1;

        if step % cfg.val_every == 0 || step == cfg.steps {
            let v = val.loss(model)?;
            if !v.is_finite() {
                return Err(Error::Diverged { step });
            }
            let train_loss = running / running_n as f64;
            running = 0.0;
            running_n = 0;
            if cfg.verbose {
                eprintln!("step {step:>6}  train {train_loss:.5}  val {v:.5}");
            }
            log.push(LogEntry {
                step,
                train_loss,
                val_loss: Some(v),
            });
            if best.as_ref().is_none_or(|(_, b, _)| v < *b) {
                best = Some((step, v, model.store().snapshot()?));
            }
        }
    }
    let (best_step, best_val_loss, weights) = best.expect("the final step is always validated");
    model.store().restore(&weights)?;
    Ok(TrainReport {
        log,
        best_step,
        best_val_loss,
    })
}

/// Fixed noisy inputs for validation so successive evaluations compare the
/// same task.
struct ValidationSet {
    items: Vec<ValidationVolume>,
    size: (usize, usize),
}

struct ValidationVolume {
    x0: Vec<Vec<f64>>,
    x_t: Vec<Vec<f64>>,
    ts: Vec<usize>,
}

impl ValidationSet {
    fn new(subjects: &[&Subject], schedule: &NoiseSchedule, cfg: &TrainConfig) -> Result<Self> {
        let mut items = Vec::with_capacity(subjects.len());
        let mut size = (0, 0);
        for s in subjects {
            let vol_seed = seed::derive(cfg.seed, &[seed::label("validation"), seed::label(&s.id)]);
            let mut rng = seed::rng(vol_seed, &[]);
            let d = s.volume.dims();
            size = (d.h, d.w);
            let mut item = ValidationVolume {
                x0: Vec::new(),
                x_t: Vec::new(),
                ts: Vec::new(),
            };
            for sl in extract_slices(&s.volume) {
                let t = rng.random_range(1..=schedule.steps());
                let n = cfg.noise.sample(size, seed::derive(vol_seed, &[sl.index as u64]))?;
                let (a, sd) = schedule.mixing(t)?;
                item.x_t.push(mix(&sl.pixels, &n.values, a, sd));
                item.x0.push(sl.pixels);
                item.ts.push(t);
            }
            items.push(item);
        }
        Ok(Self { items, size })
    }

    fn loss(&self, model: &DenoiserModel) -> Result<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for item in &self.items {
            let x0_refs: Vec<&[f64]> = item.x0.iter().map(Vec::as_slice).collect();
            let xt_refs: Vec<&[f64]> = item.x_t.iter().map(Vec::as_slice).collect();
            let x0 = batch_tensor(&x0_refs, self.size, model.dtype())?;
            let x_t = batch_tensor(&xt_refs, self.size, model.dtype())?;
            let rec = model.reconstruct(&x_t, &item.ts, &x0)?;
            let l: f64 = l1_loss(&x0, &rec)?.to_dtype(candle_core::DType::F64)?.to_scalar()?;
            sum += l * item.ts.len() as f64;
            n += item.ts.len();
        }
        Ok(sum / n as f64)
    }
}
