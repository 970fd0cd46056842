//! C interface to the cddpm library.
//!
//! Volumes, masks and models are opaque handles created and released by
//! the library. Every fallible function returns a [`CddpmStatus`]; on
//! failure a one-line description is available from
//! [`cddpm_last_error_message`] on the same thread. Output pointers are only
//! written on success.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use cddpm::config::ExperimentConfig;
use cddpm::diffusion::{ensemble_reconstruct, NoiseConfig};
use cddpm::metrics::{auprc, dice, histogram_pair, kld, psnr, ssim};
use cddpm::model::checkpoint::Checkpoint;
use cddpm::model::DenoiserModel;
use cddpm::pipeline::{score_map, segment, Connectivity, PostProcConfig};
use cddpm::schedule::{linear_schedule, NoiseSchedule};
use cddpm::volume::{read_mask, read_volume, write_mask, write_volume, BinaryMask, Dims, Volume};
use cddpm::Error;

/// Result codes of every fallible function.
#[repr(i32)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CddpmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    Io = 4,
    Format = 5,
    Config = 6,
    IncompatibleCheckpoint = 7,
    Undefined = 8,
    Internal = 9,
    Panic = 10,
}

impl From<&Error> for CddpmStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::DimensionMismatch(_) => Self::DimensionMismatch,
            Error::InvalidArgument(_)
            | Error::OutOfRange(_)
            | Error::EmptyVolume
            | Error::NonBinary(_)
            | Error::AnomalyDoesNotFit
            | Error::Unknown { .. } => Self::InvalidArgument,
            Error::UndefinedRecall => Self::Undefined,
            Error::Io(_) => Self::Io,
            Error::Format(_) => Self::Format,
            Error::Config(_) => Self::Config,
            Error::IncompatibleCheckpoint(_) => Self::IncompatibleCheckpoint,
            _ => Self::Internal,
        }
    }
}

/// A 3D intensity volume.
pub struct CddpmVolume(Volume);

/// A 3D binary mask.
pub struct CddpmMask(BinaryMask);

/// A trained denoiser together with its noise schedule and noise settings.
pub struct CddpmModel {
    model: DenoiserModel,
    schedule: NoiseSchedule,
    noise: NoiseConfig,
}

/// Post-processing settings; obtain defaults from
/// [`cddpm_postproc_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CddpmPostProc {
    pub median_filter: bool,
    pub brain_erosion: bool,
    pub component_filter: bool,
    /// Odd edge length of the cubic median window.
    pub median_kernel: usize,
    pub erosion_iterations: usize,
    pub min_component_size: usize,
    /// 6 or 26.
    pub connectivity: u32,
}

impl TryFrom<&CddpmPostProc> for PostProcConfig {
    type Error = Error;

    fn try_from(p: &CddpmPostProc) -> Result<Self, Error> {
        let connectivity = match p.connectivity {
            6 => Connectivity::Six,
            26 => Connectivity::TwentySix,
            other => return Err(Error::InvalidArgument(format!("connectivity {other} is not 6 or 26"))),
        };
        let cfg = PostProcConfig {
            median_filter: p.median_filter,
            brain_erosion: p.brain_erosion,
            component_filter: p.component_filter,
            median_kernel: p.median_kernel,
            erosion_iterations: p.erosion_iterations,
            min_component_size: p.min_component_size,
            connectivity,
            ..PostProcConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let clean = msg.replace(['\n', '\0'], " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(clean).expect("no interior NUL"));
}

/// Failure inside a call: a status plus message.
struct Failure(CddpmStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure((&e).into(), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(CddpmStatus::NullPointer, format!("{what} is null"))
}

/// Run `f`, translating errors and panics into a status and last-error
/// message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CddpmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            CddpmStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            CddpmStatus::Panic
        }
    }
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out<T>(p: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    p.write(value);
    Ok(())
}

/// Box `value` into a new handle at `p`; nothing is allocated when `p` is
/// null.
unsafe fn out_handle<T>(p: *mut *mut T, value: T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    p.write(Box::into_raw(Box::new(value)));
    Ok(())
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(CddpmStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

fn dims_arg(d: usize, h: usize, w: usize) -> Result<Dims, Failure> {
    Ok(Dims::new(d, h, w)?)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cddpm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next library call on this thread.
#[no_mangle]
pub extern "C" fn cddpm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

// ---------------------------------------------------------------------------
// Volumes

/// Create a volume from `d·h·w` values in z-major, row-major order.
///
/// # Safety
/// `data` must point to `d·h·w` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cddpm_volume_new(
    d: usize,
    h: usize,
    w: usize,
    data: *const f64,
    out_volume: *mut *mut CddpmVolume,
) -> CddpmStatus {
    guard(|| {
        let dims = dims_arg(d, h, w)?;
        if data.is_null() {
            return Err(null("data"));
        }
        let values = std::slice::from_raw_parts(data, dims.len()).to_vec();
        let v = Volume::new(dims, values)?;
        out_handle(out_volume, CddpmVolume(v), "out_volume")
    })
}

/// Read a volume file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out_volume` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cddpm_volume_load(path: *const c_char, out_volume: *mut *mut CddpmVolume) -> CddpmStatus {
    guard(|| {
        let v = read_volume(path_arg(path, "path")?)?;
        out_handle(out_volume, CddpmVolume(v), "out_volume")
    })
}

/// Write a volume file (values are stored as 32-bit floats).
///
/// # Safety
/// `volume` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cddpm_volume_save(volume: *const CddpmVolume, path: *const c_char) -> CddpmStatus {
    guard(|| {
        let v = borrow(volume, "volume")?;
        write_volume(path_arg(path, "path")?, &v.0)?;
        Ok(())
    })
}

/// Dimensions of a volume.
///
/// # Safety
/// `volume` must be a live handle; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn cddpm_volume_dims(
    volume: *const CddpmVolume,
    d: *mut usize,
    h: *mut usize,
    w: *mut usize,
) -> CddpmStatus {
    guard(|| {
        let dims = borrow(volume, "volume")?.0.dims();
        if d.is_null() || h.is_null() || w.is_null() {
            return Err(null("dimension output"));
        }
        d.write(dims.d);
        h.write(dims.h);
        w.write(dims.w);
        Ok(())
    })
}

/// Copy the values into `buffer`, which must hold `len = d·h·w` doubles.
///
/// # Safety
/// `volume` must be a live handle; `buffer` must have room for `len` values.
#[no_mangle]
pub unsafe extern "C" fn cddpm_volume_copy_data(volume: *const CddpmVolume, buffer: *mut f64, len: usize) -> CddpmStatus {
    guard(|| {
        let v = borrow(volume, "volume")?;
        if buffer.is_null() {
            return Err(null("buffer"));
        }
        if len != v.0.data().len() {
            return Err(Failure(
                CddpmStatus::DimensionMismatch,
                format!("buffer holds {len} values, volume has {}", v.0.data().len()),
            ));
        }
        ptr::copy_nonoverlapping(v.0.data().as_ptr(), buffer, len);
        Ok(())
    })
}

/// Release a volume; null is ignored.
///
/// # Safety
/// `volume` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cddpm_volume_free(volume: *mut CddpmVolume) {
    if !volume.is_null() {
        drop(Box::from_raw(volume));
    }
}

// ---------------------------------------------------------------------------
// Masks

/// Create a mask from `d·h·w` bytes; nonzero bytes are foreground.
///
/// # Safety
/// `data` must point to `d·h·w` readable bytes; `out_mask` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cddpm_mask_new(
    d: usize,
    h: usize,
    w: usize,
    data: *const u8,
    out_mask: *mut *mut CddpmMask,
) -> CddpmStatus {
    guard(|| {
        let dims = dims_arg(d, h, w)?;
        if data.is_null() {
            return Err(null("data"));
        }
        let flags = std::slice::from_raw_parts(data, dims.len()).iter().map(|&b| b != 0).collect();
        let m = BinaryMask::new(dims, flags)?;
        out_handle(out_mask, CddpmMask(m), "out_mask")
    })
}

/// Read a mask file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out_mask` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cddpm_mask_load(path: *const c_char, out_mask: *mut *mut CddpmMask) -> CddpmStatus {
    guard(|| {
        let m = read_mask(path_arg(path, "path")?)?;
        out_handle(out_mask, CddpmMask(m), "out_mask")
    })
}

/// Write a mask file.
///
/// # Safety
/// `mask` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cddpm_mask_save(mask: *const CddpmMask, path: *const c_char) -> CddpmStatus {
    guard(|| {
        let m = borrow(mask, "mask")?;
        write_mask(path_arg(path, "path")?, &m.0)?;
        Ok(())
    })
}

/// Number of foreground voxels.
///
/// # Safety
/// `mask` must be a live handle; `count` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cddpm_mask_count(mask: *const CddpmMask, count: *mut usize) -> CddpmStatus {
    guard(|| {
        let m = borrow(mask, "mask")?;
        out(count, m.0.count(), "count")
    })
}

/// Copy the mask as 0/1 bytes into `buffer` of `len = d·h·w` bytes.
///
/// # Safety
/// `mask` must be a live handle; `buffer` must have room for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn cddpm_mask_copy_data(mask: *const CddpmMask, buffer: *mut u8, len: usize) -> CddpmStatus {
    guard(|| {
        let m = borrow(mask, "mask")?;
        if buffer.is_null() {
            return Err(null("buffer"));
        }
        if len != m.0.data().len() {
            return Err(Failure(
                CddpmStatus::DimensionMismatch,
                format!("buffer holds {len} bytes, mask has {}", m.0.data().len()),
            ));
        }
        for (i, &b) in m.0.data().iter().enumerate() {
            buffer.add(i).write(b as u8);
        }
        Ok(())
    })
}

/// Release a mask; null is ignored.
///
/// # Safety
/// `mask` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cddpm_mask_free(mask: *mut CddpmMask) {
    if !mask.is_null() {
        drop(Box::from_raw(mask));
    }
}

// ---------------------------------------------------------------------------
// Metrics

/// Dice overlap; two empty masks give 1.
///
/// # Safety
/// Handles must be live; `result` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cddpm_dice(pred: *const CddpmMask, gt: *const CddpmMask, result: *mut f64) -> CddpmStatus {
    guard(|| {
        let v = dice(&borrow(pred, "pred")?.0, &borrow(gt, "gt")?.0)?;
        out(result, v, "result")
    })
}

/// Area under the precision-recall curve of `score` against `gt`.
///
/// # Safety
/// Handles must be live; `result` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cddpm_auprc(score: *const CddpmVolume, gt: *const CddpmMask, result: *mut f64) -> CddpmStatus {
    guard(|| {
        let v = auprc(&[&borrow(score, "score")?.0], &[&borrow(gt, "gt")?.0])?;
        out(result, v, "result")
    })
}

/// Structural similarity of two volumes.
///
/// # Safety
/// Handles must be live; `result` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cddpm_ssim(a: *const CddpmVolume, b: *const CddpmVolume, result: *mut f64) -> CddpmStatus {
    guard(|| {
        let v = ssim(&borrow(a, "a")?.0, &borrow(b, "b")?.0)?;
        out(result, v, "result")
    })
}

/// Peak signal-to-noise ratio; identical volumes give +infinity.
///
/// # Safety
/// Handles must be live; `result` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cddpm_psnr(a: *const CddpmVolume, b: *const CddpmVolume, result: *mut f64) -> CddpmStatus {
    guard(|| {
        let v = psnr(&borrow(a, "a")?.0, &borrow(b, "b")?.0)?;
        out(result, v, "result")
    })
}

/// KL divergence between the in-brain intensity histograms of an input and
/// its reconstruction.
///
/// # Safety
/// Handles must be live; `result` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cddpm_histogram_kld(
    input: *const CddpmVolume,
    reconstruction: *const CddpmVolume,
    brain: *const CddpmMask,
    result: *mut f64,
) -> CddpmStatus {
    guard(|| {
        let (p, q) = histogram_pair(
            &borrow(input, "input")?.0,
            &borrow(reconstruction, "reconstruction")?.0,
            &borrow(brain, "brain")?.0,
        )?;
        out(result, kld(&p, &q)?, "result")
    })
}

// ---------------------------------------------------------------------------
// Post-processing

/// Default post-processing settings.
#[no_mangle]
pub extern "C" fn cddpm_postproc_default() -> CddpmPostProc {
    let d = PostProcConfig::default();
    CddpmPostProc {
        median_filter: d.median_filter,
        brain_erosion: d.brain_erosion,
        component_filter: d.component_filter,
        median_kernel: d.median_kernel,
        erosion_iterations: d.erosion_iterations,
        min_component_size: d.min_component_size,
        connectivity: match d.connectivity {
            Connectivity::Six => 6,
            Connectivity::TwentySix => 26,
        },
    }
}

/// Anomaly score map: residual, optional median filter and optional
/// restriction to the eroded brain mask.
///
/// # Safety
/// Handles must be live; `settings` must point to valid settings;
/// `out_score` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cddpm_score_map(
    input: *const CddpmVolume,
    reconstruction: *const CddpmVolume,
    brain: *const CddpmMask,
    settings: *const CddpmPostProc,
    out_score: *mut *mut CddpmVolume,
) -> CddpmStatus {
    guard(|| {
        let cfg = PostProcConfig::try_from(borrow(settings, "settings")?)?;
        let s = score_map(
            &borrow(input, "input")?.0,
            &borrow(reconstruction, "reconstruction")?.0,
            &borrow(brain, "brain")?.0,
            &cfg,
        )?;
        out_handle(out_score, CddpmVolume(s), "out_score")
    })
}

/// Binarize a score map at `threshold` and, if enabled, drop small
/// connected components.
///
/// # Safety
/// Handles must be live; `settings` must point to valid settings;
/// `out_mask` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cddpm_segment(
    score: *const CddpmVolume,
    threshold: f64,
    settings: *const CddpmPostProc,
    out_mask: *mut *mut CddpmMask,
) -> CddpmStatus {
    guard(|| {
        let cfg = PostProcConfig::try_from(borrow(settings, "settings")?)?;
        let m = segment(&borrow(score, "score")?.0, threshold, &cfg)?;
        out_handle(out_mask, CddpmMask(m), "out_mask")
    })
}

// ---------------------------------------------------------------------------
// Models

/// Load a model checkpoint. With a configuration file, its schedule and
/// noise settings are used and the checkpoint must match its model
/// section; with `config_path` null the defaults apply.
///
/// # Safety
/// `checkpoint_path` must be a NUL-terminated string, `config_path` null or
/// NUL-terminated; `out_model` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cddpm_model_load(
    checkpoint_path: *const c_char,
    config_path: *const c_char,
    out_model: *mut *mut CddpmModel,
) -> CddpmStatus {
    guard(|| {
        let ck = Checkpoint::load(path_arg(checkpoint_path, "checkpoint_path")?)?;
        let m = if config_path.is_null() {
            CddpmModel {
                model: DenoiserModel::from_checkpoint(&ck)?,
                schedule: linear_schedule(1000, 1e-4, 2e-2)?,
                noise: NoiseConfig::default(),
            }
        } else {
            let cfg = ExperimentConfig::load(path_arg(config_path, "config_path")?)?;
            CddpmModel {
                model: DenoiserModel::from_checkpoint_expecting(&ck, &cfg.model_config()?)?,
                schedule: cfg.schedule()?,
                noise: cfg.noise_config()?,
            }
        };
        out_handle(out_model, m, "out_model")
    })
}

/// Reconstruct a volume at the noise levels `t_list[0..n_levels]`,
/// averaging the levels. `seed` fixes the test-time noise.
///
/// # Safety
/// Handles must be live; `t_list` must hold `n_levels` values;
/// `out_reconstruction` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cddpm_reconstruct(
    model: *const CddpmModel,
    input: *const CddpmVolume,
    t_list: *const usize,
    n_levels: usize,
    seed: u64,
    out_reconstruction: *mut *mut CddpmVolume,
) -> CddpmStatus {
    guard(|| {
        let m = borrow(model, "model")?;
        if t_list.is_null() {
            return Err(null("t_list"));
        }
        let levels = std::slice::from_raw_parts(t_list, n_levels);
        let r = ensemble_reconstruct(&m.model, &borrow(input, "input")?.0, levels, &m.schedule, &m.noise, seed, false)?;
        out_handle(out_reconstruction, CddpmVolume(r.x0_rec), "out_reconstruction")
    })
}

/// Release a model; null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cddpm_model_free(model: *mut CddpmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
