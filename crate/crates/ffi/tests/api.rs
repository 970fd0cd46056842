use std::ffi::{CStr, CString};
use std::ptr;

use cddpm::model::{DenoiserModel, ModelConfig, Preset};
use cddpm::volume::{BinaryMask, Dims, Volume};
use cddpm_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(cddpm_last_error_message()) }.to_string_lossy().into_owned()
}

fn volume(d: usize, h: usize, w: usize, f: impl Fn(usize) -> f64) -> *mut CddpmVolume {
    let data: Vec<f64> = (0..d * h * w).map(f).collect();
    let mut v = ptr::null_mut();
    assert_eq!(unsafe { cddpm_volume_new(d, h, w, data.as_ptr(), &mut v) }, CddpmStatus::Ok);
    v
}

fn mask(d: usize, h: usize, w: usize, f: impl Fn(usize) -> bool) -> *mut CddpmMask {
    let data: Vec<u8> = (0..d * h * w).map(|i| f(i) as u8).collect();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { cddpm_mask_new(d, h, w, data.as_ptr(), &mut m) }, CddpmStatus::Ok);
    m
}

#[test]
fn volume_round_trip_through_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("v.cdv").to_str().unwrap()).unwrap();
    let v = volume(2, 3, 4, |i| i as f64 * 0.25);
    unsafe {
        assert_eq!(cddpm_volume_save(v, path.as_ptr()), CddpmStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(cddpm_volume_load(path.as_ptr(), &mut back), CddpmStatus::Ok);
        let (mut d, mut h, mut w) = (0, 0, 0);
        assert_eq!(cddpm_volume_dims(back, &mut d, &mut h, &mut w), CddpmStatus::Ok);
        assert_eq!((d, h, w), (2, 3, 4));
        let mut buf = vec![0.0; 24];
        assert_eq!(cddpm_volume_copy_data(back, buf.as_mut_ptr(), 24), CddpmStatus::Ok);
        assert_eq!(buf, (0..24).map(|i| i as f64 * 0.25).collect::<Vec<_>>());
        assert_eq!(cddpm_volume_copy_data(back, buf.as_mut_ptr(), 23), CddpmStatus::DimensionMismatch);
        assert!(last_error().contains("23"));
        cddpm_volume_free(back);
        cddpm_volume_free(v);
    }
}

#[test]
fn mask_round_trip_and_count() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.cdv").to_str().unwrap()).unwrap();
    let m = mask(2, 4, 4, |i| i % 3 == 0);
    unsafe {
        assert_eq!(cddpm_mask_save(m, path.as_ptr()), CddpmStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(cddpm_mask_load(path.as_ptr(), &mut back), CddpmStatus::Ok);
        let mut n = 0;
        assert_eq!(cddpm_mask_count(back, &mut n), CddpmStatus::Ok);
        assert_eq!(n, 11);
        let mut buf = vec![9u8; 32];
        assert_eq!(cddpm_mask_copy_data(back, buf.as_mut_ptr(), 32), CddpmStatus::Ok);
        assert!(buf.iter().enumerate().all(|(i, &b)| b == (i % 3 == 0) as u8));
        cddpm_mask_free(back);
        cddpm_mask_free(m);
    }
}

#[test]
fn errors_set_codes_and_messages() {
    unsafe {
        let mut v = ptr::null_mut();
        assert_eq!(cddpm_volume_new(0, 2, 2, [0.0].as_ptr(), &mut v), CddpmStatus::InvalidArgument);
        assert!(v.is_null());
        assert!(!last_error().is_empty());
        assert_eq!(cddpm_volume_new(1, 1, 1, ptr::null(), &mut v), CddpmStatus::NullPointer);
        let missing = CString::new("/nonexistent/volume.cdv").unwrap();
        assert_eq!(cddpm_volume_load(missing.as_ptr(), &mut v), CddpmStatus::Io);
        let a = volume(1, 2, 2, |_| 0.0);
        let b = volume(1, 2, 3, |_| 0.0);
        let mut r = 0.0;
        assert_eq!(cddpm_psnr(a, b, &mut r), CddpmStatus::DimensionMismatch);
        assert_eq!(cddpm_psnr(a, a, &mut r), CddpmStatus::Ok);
        assert!(r.is_infinite());
        assert_eq!(last_error(), "");
        assert_eq!(cddpm_dice(ptr::null(), ptr::null(), &mut r), CddpmStatus::NullPointer);
        let gt = mask(1, 2, 2, |_| false);
        assert_eq!(cddpm_auprc(a, gt, &mut r), CddpmStatus::Undefined);
        cddpm_mask_free(gt);
        cddpm_volume_free(a);
        cddpm_volume_free(b);
        // Freeing null is a no-op.
        cddpm_volume_free(ptr::null_mut());
        cddpm_mask_free(ptr::null_mut());
        cddpm_model_free(ptr::null_mut());
    }
}

#[test]
fn metrics_match_the_library() {
    let (d, h, w) = (2, 8, 8);
    let a = volume(d, h, w, |i| (i % 7) as f64 / 7.0);
    let b = volume(d, h, w, |i| (i % 5) as f64 / 5.0);
    let pm = mask(d, h, w, |i| i % 2 == 0);
    let gm = mask(d, h, w, |i| i % 3 == 0);
    let dims = Dims::new(d, h, w).unwrap();
    let lib_a = Volume::new(dims, (0..d * h * w).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
    let lib_p = BinaryMask::new(dims, (0..d * h * w).map(|i| i % 2 == 0).collect()).unwrap();
    let lib_g = BinaryMask::new(dims, (0..d * h * w).map(|i| i % 3 == 0).collect()).unwrap();
    unsafe {
        let mut r = 0.0;
        assert_eq!(cddpm_dice(pm, gm, &mut r), CddpmStatus::Ok);
        assert_eq!(r, cddpm::metrics::dice(&lib_p, &lib_g).unwrap());
        assert_eq!(cddpm_auprc(a, gm, &mut r), CddpmStatus::Ok);
        assert_eq!(r, cddpm::metrics::auprc(&[&lib_a], &[&lib_g]).unwrap());
        assert_eq!(cddpm_ssim(a, a, &mut r), CddpmStatus::Ok);
        assert!((r - 1.0).abs() < 1e-12);
        assert_eq!(cddpm_histogram_kld(a, a, pm, &mut r), CddpmStatus::Ok);
        assert_eq!(r, 0.0);
        assert_eq!(cddpm_histogram_kld(a, b, pm, &mut r), CddpmStatus::Ok);
        assert!(r > 0.0);
        for p in [a, b] {
            cddpm_volume_free(p);
        }
        cddpm_mask_free(pm);
        cddpm_mask_free(gm);
    }
}

#[test]
fn pipeline_finds_a_bright_block() {
    let (d, h, w) = (6, 16, 16);
    let inside = |i: usize| {
        let (z, y, x) = (i / (h * w), (i / w) % h, i % w);
        (1..5).contains(&z) && (4..10).contains(&y) && (5..11).contains(&x)
    };
    let input = volume(d, h, w, |i| if inside(i) { 0.9 } else { 0.3 });
    let rec = volume(d, h, w, |_| 0.3);
    let brain = mask(d, h, w, |_| true);
    unsafe {
        let settings = cddpm_postproc_default();
        assert_eq!(settings.connectivity, 26);
        let mut score = ptr::null_mut();
        assert_eq!(cddpm_score_map(input, rec, brain, &settings, &mut score), CddpmStatus::Ok);
        let mut seg = ptr::null_mut();
        assert_eq!(cddpm_segment(score, 0.3, &settings, &mut seg), CddpmStatus::Ok);
        let mut n = 0;
        cddpm_mask_count(seg, &mut n);
        assert!(n > 0 && n <= 144, "{n}");
        let mut buf = vec![0u8; d * h * w];
        cddpm_mask_copy_data(seg, buf.as_mut_ptr(), buf.len());
        assert!(buf.iter().enumerate().all(|(i, &b)| b == 0 || inside(i)));

        let mut bad = settings;
        bad.median_kernel = 4;
        let mut s2 = ptr::null_mut();
        assert_eq!(cddpm_score_map(input, rec, brain, &bad, &mut s2), CddpmStatus::Config);
        bad = settings;
        bad.connectivity = 18;
        assert_eq!(cddpm_score_map(input, rec, brain, &bad, &mut s2), CddpmStatus::InvalidArgument);
        assert!(s2.is_null());
        cddpm_mask_free(seg);
        cddpm_volume_free(score);
        cddpm_volume_free(input);
        cddpm_volume_free(rec);
        cddpm_mask_free(brain);
    }
}

#[test]
fn model_reconstruction_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ModelConfig::desk(Preset::Cddpm);
    cfg.unet.level_channels = vec![4, 8];
    cfg.unet.groups = 2;
    cfg.unet.image_size = (16, 16);
    cfg.encoder.stage_channels = vec![2, 4];
    cfg.encoder.output_dim = 4;
    cfg.context_dim = 4;
    let dtype = cddpm::config::ExperimentConfig::default().dtype().unwrap();
    let model = DenoiserModel::new(cfg, dtype, 3).unwrap();
    let ck = dir.path().join("model.ck");
    model.to_checkpoint().unwrap().save(&ck).unwrap();
    let ck_c = CString::new(ck.to_str().unwrap()).unwrap();

    let dims = Dims::new(2, 16, 16).unwrap();
    let x = Volume::from_fn(dims, |z, y, x| ((y * 16 + x + z) % 9) as f64 / 9.0).unwrap();
    let input = volume(2, 16, 16, |i| x.data()[i]);
    let levels = [250usize, 500];
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(cddpm_model_load(ck_c.as_ptr(), ptr::null(), &mut m), CddpmStatus::Ok);
        let mut rec = ptr::null_mut();
        assert_eq!(cddpm_reconstruct(m, input, levels.as_ptr(), 2, 42, &mut rec), CddpmStatus::Ok);
        let mut buf = vec![0.0; dims.len()];
        cddpm_volume_copy_data(rec, buf.as_mut_ptr(), buf.len());
        let schedule = cddpm::schedule::linear_schedule(1000, 1e-4, 2e-2).unwrap();
        let expected = cddpm::diffusion::ensemble_reconstruct(
            &model,
            &x,
            &levels,
            &schedule,
            &cddpm::diffusion::NoiseConfig::default(),
            42,
            false,
        )
        .unwrap();
        assert_eq!(buf, expected.x0_rec.data());

        let mut rec2 = ptr::null_mut();
        assert_eq!(cddpm_reconstruct(m, input, levels.as_ptr(), 0, 42, &mut rec2), CddpmStatus::InvalidArgument);
        let wrong = volume(1, 8, 8, |_| 0.5);
        assert_eq!(cddpm_reconstruct(m, wrong, levels.as_ptr(), 2, 42, &mut rec2), CddpmStatus::DimensionMismatch);
        assert!(rec2.is_null());
        cddpm_volume_free(wrong);
        cddpm_volume_free(rec);
        cddpm_model_free(m);

        let not_a_model = dir.path().join("junk.ck");
        std::fs::write(&not_a_model, b"junk").unwrap();
        let junk = CString::new(not_a_model.to_str().unwrap()).unwrap();
        assert_ne!(cddpm_model_load(junk.as_ptr(), ptr::null(), &mut m), CddpmStatus::Ok);
        cddpm_volume_free(input);
    }
}

#[test]
fn version_is_set() {
    let v = unsafe { CStr::from_ptr(cddpm_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}
