//! Forward noising, the reconstruction loss, single-step x0 estimation and
//! multi-level ensembling.

use candle_core::{DType, Tensor};

use crate::error::{bail, Result};
use crate::model::film::ContextVector;
use crate::model::{batch_tensor, slice_tensor, tensor_images, DenoiserModel};
use crate::noise::{sample_noise, NoiseField, NoiseKind, SimplexParams};
use crate::schedule::NoiseSchedule;
use crate::seed;
use crate::volume::{extract_slices, Slice, Volume};

/// Noise used for the forward process.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    pub kind: NoiseKind,
    pub simplex: SimplexParams,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            kind: NoiseKind::Simplex,
            simplex: SimplexParams::default(),
        }
    }
}

impl NoiseConfig {
    pub fn sample(&self, dims: (usize, usize), seed: u64) -> Result<NoiseField> {
        sample_noise(dims, self.kind, seed, &self.simplex)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusedSample {
    pub x_t: Slice,
    pub t: usize,
    pub noise: NoiseField,
    pub x0_ref: Slice,
}

/// `x_t = sqrt(ᾱ_t)·x0 + sqrt(1 - ᾱ_t)·noise`; `t = 0` returns `x0`.
pub fn forward_diffuse(
    x0: &Slice,
    t: usize,
    schedule: &NoiseSchedule,
    noise: &NoiseField,
) -> Result<DiffusedSample> {
    if noise.h != x0.h || noise.w != x0.w {
        bail!(
            DimensionMismatch,
            "noise {}x{} for slice {}x{}",
            noise.h,
            noise.w,
            x0.h,
            x0.w
        );
    }
    let pixels = if t == 0 {
        x0.pixels.clone()
    } else {
        let (a, s) = schedule.mixing(t)?;
        mix(&x0.pixels, &noise.values, a, s)
    };
    Ok(DiffusedSample {
        x_t: Slice::new(x0.index, x0.h, x0.w, pixels)?,
        t,
        noise: noise.clone(),
        x0_ref: x0.clone(),
    })
}

pub(crate) fn mix(x0: &[f64], noise: &[f64], a: f64, s: f64) -> Vec<f64> {
    x0.iter().zip(noise).map(|(x, n)| a * x + s * n).collect()
}

/// Mean absolute error over every pixel of the batch.
pub fn train_step_loss(x0: &[Slice], x0_rec: &[Slice]) -> Result<f64> {
    if x0.len() != x0_rec.len() || x0.is_empty() {
        bail!(DimensionMismatch, "batches of {} and {} slices", x0.len(), x0_rec.len());
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (a, b) in x0.iter().zip(x0_rec) {
        if a.h != b.h || a.w != b.w {
            bail!(DimensionMismatch, "slice {}x{} vs {}x{}", a.h, a.w, b.h, b.w);
        }
        sum += a.pixels.iter().zip(&b.pixels).map(|(x, y)| (x - y).abs()).sum::<f64>();
        n += a.pixels.len();
    }
    Ok(sum / n as f64)
}

/// Tensor form of the loss, used for training.
pub fn l1_loss(x0: &Tensor, x0_rec: &Tensor) -> Result<Tensor> {
    if x0.dims() != x0_rec.dims() {
        bail!(DimensionMismatch, "{:?} vs {:?}", x0.dims(), x0_rec.dims());
    }
    Ok((x0 - x0_rec)?.abs()?.mean_all()?)
}

/// One forward pass of the denoiser at step `t`, no iterative sampling.
pub fn estimate_x0(model: &DenoiserModel, x_t: &Slice, t: usize, c: &ContextVector, steps: usize) -> Result<Slice> {
    if t == 0 || t > steps {
        bail!(OutOfRange, "t = {t} outside [1, {steps}]");
    }
    let x = slice_tensor(x_t, model.dtype())?;
    let out = model.forward(&x, &[t], &c.to_tensor(model.dtype())?)?;
    let pixels = tensor_images(&out)?.remove(0);
    Slice::new(x_t.index, x_t.h, x_t.w, pixels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionResult {
    pub x0_rec: Volume,
    pub t_list: Vec<usize>,
    /// Per-level reconstructions in `t_list` order, when retained.
    pub per_level: Option<Vec<Volume>>,
}

/// Seed of the noise added to slice `z` at level `t`. Independent of the
/// other levels so single-level runs reuse exactly the ensemble's noise.
pub fn inference_noise_seed(volume_seed: u64, z: usize, t: usize) -> u64 {
    seed::derive(volume_seed, &[seed::label("inference"), z as u64, t as u64])
}

/// Reconstruct at one level: noise every slice to `t`, predict x0.
fn reconstruct_level(
    model: &DenoiserModel,
    slices: &[Slice],
    context: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
    noise: &NoiseConfig,
    volume_seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let (a, s) = schedule.mixing(t)?;
    let (h, w) = (slices[0].h, slices[0].w);
    let noisy: Vec<Vec<f64>> = slices
        .iter()
        .map(|sl| {
            let n = noise.sample((h, w), inference_noise_seed(volume_seed, sl.index, t))?;
            Ok(mix(&sl.pixels, &n.values, a, s))
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&[f64]> = noisy.iter().map(Vec::as_slice).collect();
    let x_t = batch_tensor(&refs, (h, w), model.dtype())?;
    let out = model.forward(&x_t, &vec![t; slices.len()], context)?;
    tensor_images(&out)
}

/// Reconstruct a volume slice-wise and average over the noise levels.
pub fn ensemble_reconstruct(
    model: &DenoiserModel,
    x0: &Volume,
    t_list: &[usize],
    schedule: &NoiseSchedule,
    noise: &NoiseConfig,
    volume_seed: u64,
    retain_levels: bool,
) -> Result<ReconstructionResult> {
    if t_list.is_empty() {
        bail!(InvalidArgument, "t_list is empty");
    }
    if let Some(&t) = t_list.iter().find(|&&t| t == 0 || t > schedule.steps()) {
        bail!(OutOfRange, "t = {t} outside [1, {}]", schedule.steps());
    }
    let dims = x0.dims();
    let slices = extract_slices(x0);
    let refs: Vec<&[f64]> = slices.iter().map(|s| s.pixels.as_slice()).collect();
    let x0_batch = batch_tensor(&refs, (dims.h, dims.w), model.dtype())?;
    let context = model.encode(&x0_batch)?;

    let mut levels = Vec::with_capacity(t_list.len());
    for &t in t_list {
        let images = reconstruct_level(model, &slices, &context, t, schedule, noise, volume_seed)?;
        levels.push(Volume::new(dims, images.concat())?);
    }
    let x0_rec = mean_volumes(&levels)?;
    Ok(ReconstructionResult {
        x0_rec,
        t_list: t_list.to_vec(),
        per_level: retain_levels.then_some(levels),
    })
}

/// Voxelwise arithmetic mean, summed in list order.
pub fn mean_volumes(vols: &[Volume]) -> Result<Volume> {
    let first = vols
        .first()
        .ok_or_else(|| crate::Error::InvalidArgument("no volumes to average".into()))?;
    let dims = first.dims();
    let mut acc = vec![0.0; dims.len()];
    for v in vols {
        v.ensure_same_dims(dims)?;
        for (a, x) in acc.iter_mut().zip(v.data()) {
            *a += x;
        }
    }
    let n = vols.len() as f64;
    Volume::new(dims, acc.into_iter().map(|a| a / n).collect())
}

/// `x_t` for a training batch: `(B, 1, H, W)` tensors from per-sample
/// slices, steps and noise fields.
pub fn diffuse_batch(
    x0: &[&[f64]],
    ts: &[usize],
    noises: &[NoiseField],
    schedule: &NoiseSchedule,
    size: (usize, usize),
    dtype: DType,
) -> Result<Tensor> {
    let mixed: Vec<Vec<f64>> = x0
        .iter()
        .zip(ts)
        .zip(noises)
        .map(|((x, &t), n)| {
            let (a, s) = schedule.mixing(t)?;
            Ok(mix(x, &n.values, a, s))
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&[f64]> = mixed.iter().map(Vec::as_slice).collect();
    batch_tensor(&refs, size, dtype)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::NoiseKind;
    use crate::schedule::linear_schedule;

    fn slice(h: usize, w: usize, v: f64) -> Slice {
        Slice::new(0, h, w, vec![v; h * w]).unwrap()
    }

    #[test]
    fn step_zero_is_identity() {
        let s = linear_schedule(1000, 1e-4, 2e-2).unwrap();
        let x0 = Slice::new(0, 2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let n = sample_noise((2, 2), NoiseKind::Gaussian, 1, &SimplexParams::default()).unwrap();
        assert_eq!(forward_diffuse(&x0, 0, &s, &n).unwrap().x_t, x0);
    }

    #[test]
    fn final_step_is_almost_pure_noise() {
        let s = linear_schedule(1000, 1e-4, 2e-2).unwrap();
        let x0 = slice(4, 4, 0.8);
        let n = sample_noise((4, 4), NoiseKind::Gaussian, 2, &SimplexParams::default()).unwrap();
        let d = forward_diffuse(&x0, 1000, &s, &n).unwrap();
        for (a, b) in d.x_t.pixels.iter().zip(&n.values) {
            assert!((a - b).abs() < 0.01);
        }
    }

    #[test]
    fn mismatched_noise_is_rejected() {
        let s = linear_schedule(10, 1e-4, 2e-2).unwrap();
        let n = sample_noise((3, 2), NoiseKind::Gaussian, 2, &SimplexParams::default()).unwrap();
        assert!(forward_diffuse(&slice(2, 2, 0.0), 3, &s, &n).is_err());
    }

    #[test]
    fn loss_values() {
        let ones = vec![slice(3, 3, 1.0), slice(3, 3, 1.0)];
        let zeros = vec![slice(3, 3, 0.0), slice(3, 3, 0.0)];
        assert_eq!(train_step_loss(&ones, &ones).unwrap(), 0.0);
        assert_eq!(train_step_loss(&ones, &zeros).unwrap(), 1.0);
        assert!(train_step_loss(&ones, &zeros[..1]).is_err());
    }

    #[test]
    fn loss_matches_scalar_oracle() {
        use rand::Rng;
        let mut rng = seed::rng(6, &[]);
        let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
            Slice::new(0, 4, 5, (0..20).map(|_| rng.random::<f64>()).collect()).unwrap()
        };
        let a: Vec<Slice> = (0..3).map(|_| mk(&mut rng)).collect();
        let b: Vec<Slice> = (0..3).map(|_| mk(&mut rng)).collect();
        let mut oracle = 0.0;
        for k in 0..3 {
            for i in 0..20 {
                oracle += (a[k].pixels[i] - b[k].pixels[i]).abs();
            }
        }
        oracle /= 60.0;
        assert!((train_step_loss(&a, &b).unwrap() - oracle).abs() < 1e-15);
        let ta = batch_tensor(&a.iter().map(|s| s.pixels.as_slice()).collect::<Vec<_>>(), (4, 5), DType::F64).unwrap();
        let tb = batch_tensor(&b.iter().map(|s| s.pixels.as_slice()).collect::<Vec<_>>(), (4, 5), DType::F64).unwrap();
        let tl: f64 = l1_loss(&ta, &tb).unwrap().to_scalar().unwrap();
        assert!((tl - oracle).abs() < 1e-12);
    }

    #[test]
    fn mean_of_one_is_identity() {
        let v = Volume::filled(crate::volume::Dims::new(1, 2, 2).unwrap(), 0.3);
        assert_eq!(mean_volumes(&[v.clone()]).unwrap(), v);
    }
}
