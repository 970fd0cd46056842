//! Experiment orchestration behind the command-line interface: dataset
//! export, pre-training, training, reconstruction, evaluation and the
//! cross-run report. Every command writes the effective configuration and a
//! run manifest into its output directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::augment::contrast_transform;
use crate::config::{EncoderInit, ExperimentConfig};
use crate::diffusion::ensemble_reconstruct;
use crate::error::{bail, Error, Result};
use crate::metrics::{
    auprc, histogram_pair, kld, l1_errors, mean_std, permutation_test, psnr, ssim, Histogram, MetricReport,
    VolumeMetrics,
};
use crate::model::checkpoint::{encoder_checkpoint, encoder_weights, Checkpoint};
use crate::model::DenoiserModel;
use crate::phantom::{synthetic_dataset, Dataset, DatasetSplit, Subject};
use crate::pipeline::{greedy_threshold_search, residual, score_map, segment, threshold_grid, PostProcConfig};
use crate::pretrain::pretrain_encoder;
use crate::seed;
use crate::train::train;
use crate::volume::{encode_pgm, read_mask, read_volume, write_mask, write_volume, BinaryMask, Slice, Volume};

pub const CONFIG_FILE: &str = "config.txt";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MODEL_FILE: &str = "model.ck";
pub const ENCODER_FILE: &str = "encoder.ck";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const RECON_DIR: &str = "recon";
pub const LEVELS_DIR: &str = "recon_levels";
pub const CONTRAST_DIR: &str = "recon_contrast";

/// What a command consumed and produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    /// Seed of the test-time noise of every reconstructed volume, derived
    /// from `seed` and the subject identifier.
    pub inference_seed: u64,
    pub checkpoints: BTreeMap<String, String>,
    pub artifacts: Vec<String>,
    /// Wall-clock seconds per stage.
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    fn new(command: &str, cfg: &ExperimentConfig) -> Self {
        Self {
            command: command.into(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            inference_seed: inference_base_seed(cfg),
            checkpoints: BTreeMap::new(),
            artifacts: Vec::new(),
            timings: BTreeMap::new(),
        }
    }

    fn artifact(&mut self, path: &Path) {
        self.artifacts.push(path.display().to_string());
    }

    fn timed<T>(&mut self, stage: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f(self)?;
        *self.timings.entry(stage.into()).or_default() += start.elapsed().as_secs_f64();
        Ok(out)
    }

    /// Write `manifest.json`. A manifest already in `dir` from the same
    /// configuration is merged in, so that the commands of one run share a
    /// single manifest: commands are joined with `+`, later checkpoints and
    /// stage timings replace earlier ones and artifacts accumulate.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let merged = match Self::read(dir) {
            Ok(prev) if prev.config_hash == self.config_hash => {
                let mut m = prev;
                if m.command.split('+').all(|c| c != self.command) {
                    m.command = format!("{}+{}", m.command, self.command);
                }
                m.checkpoints.extend(self.checkpoints.clone());
                for a in &self.artifacts {
                    if !m.artifacts.contains(a) {
                        m.artifacts.push(a.clone());
                    }
                }
                m.timings.extend(self.timings.clone());
                m
            }
            _ => self.clone(),
        };
        let text = serde_json::to_string_pretty(&merged).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))
    }
}

fn inference_base_seed(cfg: &ExperimentConfig) -> u64 {
    seed::derive(cfg.seed, &[seed::label("inference")])
}

/// Seed of the test-time noise for one subject.
pub fn volume_seed(cfg: &ExperimentConfig, id: &str) -> u64 {
    seed::derive(inference_base_seed(cfg), &[seed::label(id)])
}

/// Create `out` and echo the effective configuration into it.
fn prepare_out(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_FILE), cfg.to_text())?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Datasets on disk

/// Round to the precision of the volume file format so that data generated
/// in memory and data read back from disk are identical.
fn canonical(v: &Volume) -> Volume {
    v.map(|x| x as f32 as f64).expect("same dims")
}

/// The synthetic dataset described by the configuration.
pub fn generate_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let mut ds = synthetic_dataset(&cfg.dataset_spec()?, cfg.data.seed)?;
    for s in ds.subjects.values_mut() {
        s.volume = canonical(&s.volume);
    }
    Ok(ds)
}

/// Layout: `split.txt` with `group id` lines, `volumes/<id>.cdv`,
/// `masks/<id>_brain.cdv` and, for unhealthy subjects, `masks/<id>_seg.cdv`.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir.join("volumes"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let mut written = Vec::new();
    let mut split = String::new();
    for (group, ids) in ds.split.groups() {
        for id in ids {
            split.push_str(&format!("{group} {id}\n"));
            let s = ds.get(id)?;
            let p = dir.join("volumes").join(format!("{id}.cdv"));
            write_volume(&p, &s.volume)?;
            written.push(p);
            let p = dir.join("masks").join(format!("{id}_brain.cdv"));
            write_mask(&p, &s.brain)?;
            written.push(p);
            if let Some(a) = &s.annotation {
                let p = dir.join("masks").join(format!("{id}_seg.cdv"));
                write_mask(&p, a)?;
                written.push(p);
            }
        }
    }
    let p = dir.join("split.txt");
    fs::write(&p, split)?;
    written.push(p);
    Ok(written)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(dir.join("split.txt"))
        .map_err(|e| Error::Config(format!("no dataset in {}: {e}", dir.display())))?;
    let mut split = DatasetSplit::default();
    let mut subjects = BTreeMap::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let (group, id) = line
            .split_once(' ')
            .ok_or_else(|| Error::Format(format!("split.txt line {}: expected 'group id'", n + 1)))?;
        let list = match group {
            "healthy_train" => &mut split.healthy_train,
            "healthy_val" => &mut split.healthy_val,
            "healthy_test" => &mut split.healthy_test,
            "unhealthy_val" => &mut split.unhealthy_val,
            "unhealthy_test" => &mut split.unhealthy_test,
            other => bail!(Format, "split.txt line {}: unknown group {other}", n + 1),
        };
        list.push(id.to_string());
        let volume = read_volume(dir.join("volumes").join(format!("{id}.cdv")))?;
        let brain = read_mask(dir.join("masks").join(format!("{id}_brain.cdv")))?;
        let seg = dir.join("masks").join(format!("{id}_seg.cdv"));
        let annotation = if group.starts_with("unhealthy") { Some(read_mask(seg)?) } else { None };
        subjects.insert(
            id.to_string(),
            Subject {
                id: id.to_string(),
                volume,
                brain,
                annotation,
            },
        );
    }
    split.validate()?;
    Ok(Dataset { split, subjects })
}

/// Read the dataset from `dir` when given, else generate it.
pub fn obtain_dataset(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<Dataset> {
    match dir {
        Some(d) => read_dataset(d),
        None => generate_dataset(cfg),
    }
}

fn non_empty<'a>(ds: &'a Dataset, ids: &'a [String], what: &str) -> Result<Vec<&'a Subject>> {
    if ids.is_empty() {
        bail!(Config, "the {what} split is empty");
    }
    ds.subjects_of(ids)
}

fn annotation(s: &Subject) -> Result<&BinaryMask> {
    s.annotation
        .as_ref()
        .ok_or_else(|| Error::Config(format!("subject {} has no annotation", s.id)))
}

// ---------------------------------------------------------------------------
// Commands

/// Write the synthetic dataset plus a PNG-free preview (PGM of the middle
/// slice of every subject).
pub fn cmd_phantoms(cfg: &ExperimentConfig, out: &Path) -> Result<RunManifest> {
    prepare_out(cfg, out)?;
    let mut m = RunManifest::new("phantoms", cfg);
    m.timed("phantoms", |m| {
        let ds = generate_dataset(cfg)?;
        for p in write_dataset(&ds, out)? {
            m.artifact(&p);
        }
        let preview = out.join("preview");
        fs::create_dir_all(&preview)?;
        for s in ds.subjects.values() {
            let z = s.volume.dims().d / 2;
            let p = preview.join(format!("{}.pgm", s.id));
            fs::write(&p, encode_pgm(&s.volume.slice(z)?))?;
            m.artifact(&p);
        }
        Ok(())
    })?;
    m.write(out)?;
    Ok(m)
}

/// Masked pre-training of the context encoder on the healthy training split.
pub fn cmd_pretrain(cfg: &ExperimentConfig, out: &Path, data: Option<&Path>) -> Result<RunManifest> {
    prepare_out(cfg, out)?;
    let mut m = RunManifest::new("pretrain", cfg);
    let ds = obtain_dataset(cfg, data)?;
    let train_set = non_empty(&ds, &ds.split.healthy_train, "healthy training")?;
    let model_cfg = cfg.model_config()?;
    let rep = m.timed("pretrain", |_| {
        let vols: Vec<&Volume> = train_set.iter().map(|s| &s.volume).collect();
        pretrain_encoder(&model_cfg.encoder, &vols, &cfg.pretrain_config(), cfg.dtype()?)
    })?;
    let ck = out.join(ENCODER_FILE);
    encoder_checkpoint(&model_cfg.encoder, rep.encoder_weights.clone()).save(&ck)?;
    m.checkpoints.insert("encoder".into(), ck.display().to_string());
    let log = out.join("pretrain_loss.csv");
    fs::write(&log, rep.to_csv())?;
    m.artifact(&log);
    m.write(out)?;
    Ok(m)
}

/// Train a denoiser and save the checkpoint with the best healthy
/// validation loss. With a pretrained encoder init, the encoder checkpoint
/// comes from `encoder` or, failing that, from `out/encoder.ck`.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path, data: Option<&Path>, encoder: Option<&Path>) -> Result<RunManifest> {
    prepare_out(cfg, out)?;
    let mut m = RunManifest::new("train", cfg);
    let ds = obtain_dataset(cfg, data)?;
    let train_set = non_empty(&ds, &ds.split.healthy_train, "healthy training")?;
    let val_set = non_empty(&ds, &ds.split.healthy_val, "healthy validation")?;
    let model_cfg = cfg.model_config()?;
    let model = DenoiserModel::new(model_cfg.clone(), cfg.dtype()?, seed::derive(cfg.seed, &[seed::label("model-init")]))?;
    if cfg.encoder_init()? == EncoderInit::Pretrained && model.encoder().is_some() {
        let path = match encoder {
            Some(p) => p.to_path_buf(),
            None => out.join(ENCODER_FILE),
        };
        if !path.exists() {
            bail!(Config, "encoder_init = pretrained but no encoder checkpoint at {}", path.display());
        }
        model.load_encoder(&encoder_weights(&Checkpoint::load(&path)?, &model_cfg.encoder)?)?;
        m.checkpoints.insert("encoder".into(), path.display().to_string());
    }
    let schedule = cfg.schedule()?;
    let report = m.timed("train", |_| train(&model, &train_set, &val_set, &schedule, &cfg.train_config()?))?;
    let ck = out.join(MODEL_FILE);
    model.to_checkpoint()?.save(&ck)?;
    m.checkpoints.insert("model".into(), ck.display().to_string());
    let log = out.join("train_log.csv");
    fs::write(&log, report.to_csv())?;
    m.artifact(&log);
    m.write(out)?;
    Ok(m)
}

/// Optional extra reconstructions for the noise-level sweep and the
/// contrast study.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReconOptions {
    pub sweep: bool,
    pub contrast: bool,
}

fn level_dir(out: &Path, t: usize) -> PathBuf {
    out.join(LEVELS_DIR).join(format!("t{t}"))
}

fn contrast_dir(out: &Path, cl: f64) -> PathBuf {
    out.join(CONTRAST_DIR).join(format!("cl{cl}"))
}

fn load_model(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<DenoiserModel> {
    let ck = Checkpoint::load(checkpoint)?;
    DenoiserModel::from_checkpoint_expecting(&ck, &cfg.model_config()?)
}

/// Reconstruct the unhealthy validation/test and healthy test subjects at
/// the configured `t_test` levels into `out/recon/<id>.cdv`.
pub fn cmd_reconstruct(
    cfg: &ExperimentConfig,
    out: &Path,
    checkpoint: &Path,
    data: Option<&Path>,
    opts: ReconOptions,
) -> Result<RunManifest> {
    prepare_out(cfg, out)?;
    let mut m = RunManifest::new("reconstruct", cfg);
    let model = load_model(cfg, checkpoint)?;
    m.checkpoints.insert("model".into(), checkpoint.display().to_string());
    let ds = obtain_dataset(cfg, data)?;
    let schedule = cfg.schedule()?;
    let noise = cfg.noise_config()?;
    let recon = out.join(RECON_DIR);
    fs::create_dir_all(&recon)?;

    // Sweep levels are reconstructed together with t_test so that each
    // level's noise is shared between the sweep and the ensemble.
    let mut levels: Vec<usize> = cfg.t_test.clone();
    if opts.sweep {
        for &t in &cfg.evaluation.sweep_levels {
            if !levels.contains(&t) {
                levels.push(t);
            }
        }
        for &t in &levels {
            fs::create_dir_all(level_dir(out, t))?;
        }
    }
    let unhealthy: BTreeSet<&String> = ds.split.unhealthy_val.iter().chain(&ds.split.unhealthy_test).collect();
    let ids: Vec<&String> = ds
        .split
        .unhealthy_val
        .iter()
        .chain(&ds.split.unhealthy_test)
        .chain(&ds.split.healthy_test)
        .collect();
    m.timed("reconstruct", |m| {
        for id in &ids {
            let s = ds.get(id)?;
            let vseed = volume_seed(cfg, id);
            let r = ensemble_reconstruct(&model, &s.volume, &levels, &schedule, &noise, vseed, true)?;
            let per_level = r.per_level.expect("retained");
            let main = crate::diffusion::mean_volumes(&per_level[..cfg.t_test.len()])?;
            let p = recon.join(format!("{id}.cdv"));
            write_volume(&p, &main)?;
            m.artifact(&p);
            if opts.sweep && unhealthy.contains(id) {
                for (t, v) in levels.iter().zip(&per_level) {
                    let p = level_dir(out, *t).join(format!("{id}.cdv"));
                    write_volume(&p, v)?;
                    m.artifact(&p);
                }
            }
        }
        Ok(())
    })?;
    if opts.contrast {
        m.timed("contrast", |m| {
            for &cl in &cfg.evaluation.contrast_levels {
                let dir = contrast_dir(out, cl);
                fs::create_dir_all(&dir)?;
                for id in ds.split.healthy_test.iter().chain(&ds.split.unhealthy_test) {
                    let s = ds.get(id)?;
                    let shifted = canonical(&contrast_transform(&s.volume, cl)?);
                    let r = ensemble_reconstruct(&model, &shifted, &cfg.t_test, &schedule, &noise, volume_seed(cfg, id), false)?;
                    let p = dir.join(format!("{id}.cdv"));
                    write_volume(&p, &r.x0_rec)?;
                    m.artifact(&p);
                }
            }
            Ok(())
        })?;
    }
    m.write(out)?;
    Ok(m)
}

fn read_recon(dir: &Path, id: &str) -> Result<Volume> {
    let p = dir.join(format!("{id}.cdv"));
    if !p.exists() {
        bail!(Config, "missing reconstruction {}", p.display());
    }
    read_volume(p)
}

/// Score maps and ground truths of a split.
fn scored(ds: &Dataset, ids: &[String], recon_dir: &Path, pp: &PostProcConfig) -> Result<(Vec<Volume>, Vec<BinaryMask>, Vec<BinaryMask>)> {
    let mut scores = Vec::with_capacity(ids.len());
    let mut brains = Vec::with_capacity(ids.len());
    let mut gts = Vec::with_capacity(ids.len());
    for id in ids {
        let s = ds.get(id)?;
        let rec = read_recon(recon_dir, id)?;
        scores.push(score_map(&s.volume, &rec, &s.brain, pp)?);
        brains.push(s.brain.clone());
        gts.push(annotation(s)?.clone());
    }
    Ok((scores, brains, gts))
}

/// Threshold from the validation split and mean/std test Dice at it.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationResult {
    pub threshold: f64,
    pub val_dice: f64,
    pub test_dice: Vec<f64>,
}

fn segmentation(ds: &Dataset, recon_dir: &Path, pp: &PostProcConfig) -> Result<SegmentationResult> {
    let (vs, vb, vg) = scored(ds, &ds.split.unhealthy_val, recon_dir, pp)?;
    let grid = threshold_grid(&vs, &vb, pp)?;
    let best = greedy_threshold_search(&vs, &vg, &grid, pp)?;
    let (ts, _, tg) = scored(ds, &ds.split.unhealthy_test, recon_dir, pp)?;
    let test_dice = ts
        .iter()
        .zip(&tg)
        .map(|(s, g)| crate::metrics::dice(&segment(s, best.threshold, pp)?, g))
        .collect::<Result<Vec<_>>>()?;
    Ok(SegmentationResult {
        threshold: best.threshold,
        val_dice: best.dice,
        test_dice,
    })
}

fn f6(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.6}")
    }
}

fn histogram_text(h: &Histogram) -> String {
    let w = h.bin_width();
    h.densities
        .iter()
        .enumerate()
        .map(|(i, d)| format!("{:.6} {:.6}\n", (i as f64 + 0.5) * w, d))
        .collect()
}

/// Horizontal strip of slices with one-pixel white separators.
fn panel(slices: &[Slice]) -> Slice {
    let h = slices[0].h;
    let w = slices.iter().map(|s| s.w).sum::<usize>() + slices.len() - 1;
    let mut pixels = Vec::with_capacity(h * w);
    for y in 0..h {
        for (k, s) in slices.iter().enumerate() {
            if k > 0 {
                pixels.push(1.0);
            }
            pixels.extend_from_slice(&s.pixels[y * s.w..(y + 1) * s.w]);
        }
    }
    Slice { index: 0, h, w, pixels }
}

/// Slice with the most annotated voxels.
fn busiest_slice(gt: &BinaryMask) -> usize {
    let d = gt.dims();
    (0..d.d)
        .max_by_key(|&z| (gt.data()[z * d.slice_len()..(z + 1) * d.slice_len()].iter().filter(|&&b| b).count(), std::cmp::Reverse(z)))
        .unwrap_or(0)
}

/// Select the threshold on the unhealthy validation split, segment the test
/// split and compute all metrics. Also emits the post-processing ablation,
/// the noise-level sweep and the contrast study when their reconstructions
/// are present in `recon_root`.
pub fn cmd_evaluate(cfg: &ExperimentConfig, out: &Path, recon_root: &Path, data: Option<&Path>) -> Result<(MetricReport, RunManifest)> {
    prepare_out(cfg, out)?;
    let mut m = RunManifest::new("evaluate", cfg);
    let ds = obtain_dataset(cfg, data)?;
    non_empty(&ds, &ds.split.unhealthy_val, "unhealthy validation")?;
    non_empty(&ds, &ds.split.unhealthy_test, "unhealthy test")?;
    let pp = cfg.postproc()?;
    let recon_dir = recon_root.join(RECON_DIR);

    let report = m.timed("evaluate", |m| {
        let (vs, vb, vg) = scored(&ds, &ds.split.unhealthy_val, &recon_dir, &pp)?;
        let grid = threshold_grid(&vs, &vb, &pp)?;
        let search = greedy_threshold_search(&vs, &vg, &grid, &pp)?;
        let mut curve = String::from("threshold,val_dice\n");
        for (t, d) in search.grid.iter().zip(&search.dice_per_threshold) {
            curve.push_str(&format!("{},{}\n", f6(*t), f6(*d)));
        }
        let p = out.join("threshold_search.csv");
        fs::write(&p, curve)?;
        m.artifact(&p);

        for sub in ["pred", "hist", "panels"] {
            fs::create_dir_all(out.join(sub))?;
        }
        let mut volumes = Vec::new();
        let mut all_scores = Vec::new();
        let mut all_gts = Vec::new();
        for id in &ds.split.unhealthy_test {
            let s = ds.get(id)?;
            let gt = annotation(s)?;
            let rec = read_recon(&recon_dir, id)?;
            let score = score_map(&s.volume, &rec, &s.brain, &pp)?;
            let pred = segment(&score, search.threshold, &pp)?;
            let p = out.join("pred").join(format!("{id}.cdv"));
            write_mask(&p, &pred)?;
            m.artifact(&p);
            let (hi, hr) = histogram_pair(&s.volume, &rec, &s.brain)?;
            for (suffix, h) in [("input", &hi), ("rec", &hr)] {
                let p = out.join("hist").join(format!("{id}_{suffix}.txt"));
                fs::write(&p, histogram_text(h))?;
                m.artifact(&p);
            }
            let z = busiest_slice(gt);
            let strip = panel(&[
                s.volume.slice(z)?,
                rec.slice(z)?,
                residual(&s.volume, &rec)?.slice(z)?,
                pred.to_volume().slice(z)?,
                gt.to_volume().slice(z)?,
            ]);
            let p = out.join("panels").join(format!("{id}.pgm"));
            fs::write(&p, encode_pgm(&strip))?;
            m.artifact(&p);
            let l1 = l1_errors(&s.volume, &rec, gt, &s.brain)?;
            volumes.push(VolumeMetrics {
                id: id.clone(),
                dice: crate::metrics::dice(&pred, gt)?,
                auprc: Some(auprc(&[&score], &[gt])?),
                ssim: ssim(&s.volume, &rec)?,
                psnr: psnr(&s.volume, &rec)?,
                l1_anomalous: Some(l1.anomalous),
                l1_healthy: Some(l1.healthy),
                l1_ratio: Some(l1.ratio()),
                kld: kld(&hi, &hr)?,
            });
            all_scores.push(score);
            all_gts.push(gt.clone());
        }
        let pooled = auprc(&all_scores.iter().collect::<Vec<_>>(), &all_gts.iter().collect::<Vec<_>>())?;
        let report = MetricReport {
            threshold: search.threshold,
            pooled_auprc: Some(pooled),
            volumes,
        };
        for (name, text) in [(METRICS_FILE, report.per_volume_csv()), (SUMMARY_FILE, report.summary_csv())] {
            let p = out.join(name);
            fs::write(&p, text)?;
            m.artifact(&p);
        }
        Ok(report)
    })?;

    m.timed("reconstruction-quality", |m| {
        if ds.split.healthy_test.is_empty() {
            return Ok(());
        }
        let mut csv = String::from("id,ssim,psnr,l1,kld\n");
        for id in &ds.split.healthy_test {
            let s = ds.get(id)?;
            let rec = read_recon(&recon_dir, id)?;
            let l1 = s.volume.data().iter().zip(rec.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / s.volume.data().len() as f64;
            let (hi, hr) = histogram_pair(&s.volume, &rec, &s.brain)?;
            csv.push_str(&format!(
                "{id},{},{},{},{}\n",
                f6(ssim(&s.volume, &rec)?),
                f6(psnr(&s.volume, &rec)?),
                f6(l1),
                f6(kld(&hi, &hr)?)
            ));
        }
        let p = out.join("reconstruction.csv");
        fs::write(&p, csv)?;
        m.artifact(&p);
        Ok(())
    })?;

    m.timed("ablation", |m| {
        let variants: [(&str, PostProcConfig); 5] = [
            ("all", pp.clone()),
            ("without_cc", PostProcConfig { component_filter: false, ..pp.clone() }),
            ("without_mf", PostProcConfig { median_filter: false, ..pp.clone() }),
            ("without_be", PostProcConfig { brain_erosion: false, ..pp.clone() }),
            (
                "none",
                PostProcConfig {
                    component_filter: false,
                    median_filter: false,
                    brain_erosion: false,
                    ..pp.clone()
                },
            ),
        ];
        let mut csv = String::from("variant,stages,threshold,val_dice,test_dice_mean,test_dice_std\n");
        for (name, v) in variants {
            let r = segmentation(&ds, &recon_dir, &v)?;
            let (mu, sd) = mean_std(&r.test_dice);
            csv.push_str(&format!("{name},{},{},{},{},{}\n", v.stages_label(), f6(r.threshold), f6(r.val_dice), f6(mu), f6(sd)));
        }
        let p = out.join("ablation.csv");
        fs::write(&p, csv)?;
        m.artifact(&p);
        Ok(())
    })?;

    let sweep_root = recon_root.join(LEVELS_DIR);
    if sweep_root.exists() {
        m.timed("sweep", |m| {
            let p = out.join("sweep.csv");
            fs::write(&p, sweep_csv(cfg, &ds, recon_root, &recon_dir, &pp)?)?;
            m.artifact(&p);
            Ok(())
        })?;
    }

    if recon_root.join(CONTRAST_DIR).exists() {
        m.timed("contrast", |m| {
            let mut csv = String::from("cl,split,kld_mean,kld_std,ssim_mean,psnr_mean\n");
            for &cl in &cfg.evaluation.contrast_levels {
                let dir = contrast_dir(recon_root, cl);
                for (split, ids) in [("healthy_test", &ds.split.healthy_test), ("unhealthy_test", &ds.split.unhealthy_test)] {
                    let (mut klds, mut ssims, mut psnrs) = (Vec::new(), Vec::new(), Vec::new());
                    for id in ids {
                        let s = ds.get(id)?;
                        let shifted = canonical(&contrast_transform(&s.volume, cl)?);
                        let rec = read_recon(&dir, id)?;
                        // Intensity shift is measured on healthy tissue only; lesions
                        // are meant to be removed by the reconstruction.
                        let tissue = match &s.annotation {
                            Some(a) => s.brain.and(&a.not())?,
                            None => s.brain.clone(),
                        };
                        let (hi, hr) = histogram_pair(&shifted, &rec, &tissue)?;
                        klds.push(kld(&hi, &hr)?);
                        ssims.push(ssim(&shifted, &rec)?);
                        psnrs.push(psnr(&shifted, &rec)?);
                    }
                    let (km, ks) = mean_std(&klds);
                    let finite: Vec<f64> = psnrs.into_iter().filter(|p| p.is_finite()).collect();
                    csv.push_str(&format!(
                        "{cl},{split},{},{},{},{}\n",
                        f6(km),
                        f6(ks),
                        f6(mean_std(&ssims).0),
                        f6(mean_std(&finite).0)
                    ));
                }
            }
            let p = out.join("contrast.csv");
            fs::write(&p, csv)?;
            m.artifact(&p);
            Ok(())
        })?;
    }
    m.write(out)?;
    Ok((report, m))
}

/// One row per sweep level plus the configured ensemble (when it has more
/// than one level), each with its own validation-selected threshold.
fn sweep_csv(cfg: &ExperimentConfig, ds: &Dataset, recon_root: &Path, recon_dir: &Path, pp: &PostProcConfig) -> Result<String> {
    let mut csv = String::from("t_test,threshold,val_dice,test_dice_mean,test_dice_std\n");
    let mut levels = cfg.evaluation.sweep_levels.clone();
    for &t in &cfg.t_test {
        if !levels.contains(&t) {
            levels.push(t);
        }
    }
    levels.sort_unstable();
    for t in levels {
        let dir = level_dir(recon_root, t);
        if !dir.exists() {
            bail!(Config, "sweep reconstructions for t = {t} are missing in {}", dir.display());
        }
        let r = segmentation(ds, &dir, pp)?;
        let (mu, sd) = mean_std(&r.test_dice);
        csv.push_str(&format!("{t},{},{},{},{}\n", f6(r.threshold), f6(r.val_dice), f6(mu), f6(sd)));
    }
    if cfg.t_test.len() > 1 {
        let r = segmentation(ds, recon_dir, pp)?;
        let (mu, sd) = mean_std(&r.test_dice);
        let label: Vec<String> = cfg.t_test.iter().map(usize::to_string).collect();
        csv.push_str(&format!("ensemble:{},{},{},{},{}\n", label.join("+"), f6(r.threshold), f6(r.val_dice), f6(mu), f6(sd)));
    }
    Ok(csv)
}

/// Pre-train (if configured), train, reconstruct with sweep and contrast
/// reconstructions, and evaluate, all inside `out`.
pub fn run_all(cfg: &ExperimentConfig, out: &Path) -> Result<(MetricReport, RunManifest)> {
    prepare_out(cfg, out)?;
    // A fresh run starts a fresh manifest.
    match fs::remove_file(out.join(MANIFEST_FILE)) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => return Err(e.into()),
        _ => {}
    }
    let uses_encoder = cfg.model_config()?.preset == crate::model::Preset::Cddpm;
    if cfg.encoder_init()? == EncoderInit::Pretrained && uses_encoder {
        cmd_pretrain(cfg, out, None)?;
    }
    cmd_train(cfg, out, None, None)?;
    cmd_reconstruct(
        cfg,
        out,
        &out.join(MODEL_FILE),
        None,
        ReconOptions {
            sweep: true,
            contrast: true,
        },
    )?;
    let (report, _) = cmd_evaluate(cfg, out, out, None)?;
    Ok((report, RunManifest::read(out)?))
}

// ---------------------------------------------------------------------------
// Report

/// Parsed per-volume metrics of one evaluated run.
#[derive(Debug, Clone)]
struct RunMetrics {
    dir: PathBuf,
    config: ExperimentConfig,
    columns: Vec<String>,
    rows: Vec<(String, Vec<Option<f64>>)>,
}

impl RunMetrics {
    fn load(dir: &Path) -> Result<Self> {
        let config = ExperimentConfig::load(dir.join(CONFIG_FILE))?;
        let text = fs::read_to_string(dir.join(METRICS_FILE))
            .map_err(|e| Error::Config(format!("{} has no {METRICS_FILE}: {e}", dir.display())))?;
        let mut lines = text.lines();
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| Error::Format(format!("empty {METRICS_FILE} in {}", dir.display())))?
            .split(',')
            .skip(1)
            .map(String::from)
            .collect();
        let mut rows = Vec::new();
        for line in lines {
            let mut cells = line.split(',');
            let id = cells.next().unwrap_or_default().to_string();
            let values = cells
                .map(|c| match c {
                    "" => Ok(None),
                    "inf" => Ok(Some(f64::INFINITY)),
                    "-inf" => Ok(Some(f64::NEG_INFINITY)),
                    v => v.parse().map(Some).map_err(|_| Error::Format(format!("bad metric value '{v}'"))),
                })
                .collect::<Result<Vec<_>>>()?;
            if values.len() != header.len() {
                bail!(Format, "row {id} has {} values for {} columns", values.len(), header.len());
            }
            rows.push((id, values));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            config,
            columns: header,
            rows,
        })
    }

    fn column(&self, name: &str) -> Vec<f64> {
        let Some(c) = self.columns.iter().position(|n| n == name) else {
            return Vec::new();
        };
        self.rows.iter().filter_map(|(_, v)| v[c]).filter(|x| x.is_finite()).collect()
    }

    /// Model label: preset plus `+SSL` for a pretrained encoder and `+ENS`
    /// for an ensemble of noise levels.
    fn label(&self) -> String {
        let mut l = self.config.preset.to_uppercase();
        if self.config.encoder_init == "pretrained" && self.config.preset == "cddpm" {
            l.push_str("+SSL");
        }
        if self.config.t_test.len() > 1 {
            l.push_str("+ENS");
        }
        l
    }
}

const REPORT_METRICS: [&str; 6] = ["dice", "auprc", "ssim", "psnr", "l1_ratio", "kld"];

/// Compare evaluated runs: mean ± std over runs (seeds) of each run's mean
/// metric per model, permutation-test p-values of per-volume Dice between
/// every pair of models, and stacked input/reconstruction/residual/
/// prediction/ground-truth panels.
pub fn cmd_report(cfg: &ExperimentConfig, out: &Path, runs: &[PathBuf], data: Option<&Path>) -> Result<RunManifest> {
    if runs.is_empty() {
        bail!(InvalidArgument, "report needs at least one run directory");
    }
    prepare_out(cfg, out)?;
    let mut m = RunManifest::new("report", cfg);
    let loaded = runs.iter().map(|r| RunMetrics::load(r)).collect::<Result<Vec<_>>>()?;
    let mut groups: BTreeMap<String, Vec<&RunMetrics>> = BTreeMap::new();
    for r in &loaded {
        groups.entry(r.label()).or_default().push(r);
    }
    let labels: Vec<&String> = groups.keys().collect();
    let reference = labels[0].clone();
    let seeds: BTreeSet<u64> = loaded.iter().map(|r| r.config.seed).collect();

    let mut table = format!(
        "# {} run(s), seeds {:?}; std is over runs (seeds replace cross-validation folds)\n",
        loaded.len(),
        seeds
    );
    table.push_str("model,runs");
    for name in REPORT_METRICS {
        table.push_str(&format!(",{name}"));
    }
    if groups.len() >= 2 {
        table.push_str(&format!(",p_dice_vs_{reference}"));
    }
    table.push('\n');
    let pooled_dice = |g: &[&RunMetrics]| g.iter().flat_map(|r| r.column("dice")).collect::<Vec<f64>>();
    for (label, g) in &groups {
        table.push_str(&format!("{label},{}", g.len()));
        for name in REPORT_METRICS {
            let per_run: Vec<f64> = g
                .iter()
                .map(|r| mean_std(&r.column(name)).0)
                .filter(|x| x.is_finite())
                .collect();
            let (mu, sd) = mean_std(&per_run);
            table.push_str(&format!(",{mu:.4} ± {sd:.4}"));
        }
        if groups.len() >= 2 {
            if *label == reference {
                table.push(',');
            } else {
                let p = permutation_test(
                    &pooled_dice(&groups[&reference]),
                    &pooled_dice(g),
                    cfg.evaluation.permutation_rounds,
                    cfg.seed,
                )?;
                table.push_str(&format!(",{p:.4}"));
            }
        }
        table.push('\n');
    }
    let p = out.join("table.csv");
    fs::write(&p, &table)?;
    m.artifact(&p);

    if groups.len() >= 2 {
        let mut csv = String::from("model_a,model_b,mean_dice_a,mean_dice_b,p_value\n");
        for (i, a) in labels.iter().enumerate() {
            for b in &labels[i + 1..] {
                let (da, db) = (pooled_dice(&groups[*a]), pooled_dice(&groups[*b]));
                let pv = permutation_test(&da, &db, cfg.evaluation.permutation_rounds, cfg.seed)?;
                csv.push_str(&format!("{a},{b},{:.6},{:.6},{pv:.6}\n", mean_std(&da).0, mean_std(&db).0));
            }
        }
        let p = out.join("pvalues.csv");
        fs::write(&p, csv)?;
        m.artifact(&p);
    }

    // Stack every run's panel of the first common test subject.
    let first = loaded[0].rows.first().map(|(id, _)| id.clone());
    if let Some(id) = first {
        let mut strips = Vec::new();
        for r in &loaded {
            let ds = obtain_dataset(&r.config, data)?;
            let Ok(s) = ds.get(&id) else { continue };
            let (Ok(rec), Ok(pred)) = (
                read_volume(r.dir.join(RECON_DIR).join(format!("{id}.cdv"))),
                read_mask(r.dir.join("pred").join(format!("{id}.cdv"))),
            ) else {
                continue;
            };
            let gt = annotation(s)?;
            let z = busiest_slice(gt);
            strips.push(panel(&[
                s.volume.slice(z)?,
                rec.slice(z)?,
                residual(&s.volume, &rec)?.slice(z)?,
                pred.to_volume().slice(z)?,
                gt.to_volume().slice(z)?,
            ]));
        }
        if !strips.is_empty() {
            let w = strips[0].w;
            let mut pixels = Vec::new();
            let mut h = 0;
            for (k, s) in strips.iter().enumerate() {
                if k > 0 {
                    pixels.extend(std::iter::repeat_n(1.0, w));
                    h += 1;
                }
                pixels.extend_from_slice(&s.pixels);
                h += s.h;
            }
            let p = out.join(format!("panel_{id}.pgm"));
            fs::write(&p, encode_pgm(&Slice { index: 0, h, w, pixels }))?;
            m.artifact(&p);
        }
    }
    m.write(out)?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.data.depth = 4;
        cfg.data.height = 16;
        cfg.data.width = 16;
        cfg.data.anomaly_radius = [1.5, 2.0];
        cfg.data.healthy_train = 3;
        cfg.data.healthy_val = 1;
        cfg.data.healthy_test = 1;
        cfg.data.unhealthy_val = 2;
        cfg.data.unhealthy_test = 2;
        cfg.model.unet_channels = vec![4, 8];
        cfg.model.groups = 2;
        cfg.model.encoder_channels = vec![2, 4];
        cfg.model.context_dim = 4;
        cfg.train.steps = 2;
        cfg.train.batch_size = 2;
        cfg.train.val_every = 1;
        cfg.pretrain.steps = 2;
        cfg.pretrain.batch_size = 2;
        cfg.evaluation.sweep_levels = vec![250, 500];
        cfg.evaluation.contrast_levels = vec![2.0];
        cfg.evaluation.permutation_rounds = 50;
        cfg.postproc.median_kernel = 3;
        cfg.postproc.erosion_iterations = 1;
        cfg.postproc.grid_size = 10;
        cfg
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&cfg).unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.split, ds.split);
        for (id, s) in &ds.subjects {
            let b = back.get(id).unwrap();
            assert_eq!(b.volume, s.volume);
            assert_eq!(b.brain, s.brain);
            assert_eq!(b.annotation, s.annotation);
        }
    }

    #[test]
    fn full_run_and_report() {
        let mut cfg = tiny_config();
        cfg.t_test = vec![250, 500];
        cfg.encoder_init = "pretrained".into();
        let dir = tempfile::tempdir().unwrap();
        let run = dir.path().join("run");
        let (report, manifest) = run_all(&cfg, &run).unwrap();
        assert_eq!(report.volumes.len(), 2);
        assert!(manifest.checkpoints.contains_key("encoder"));
        assert!(manifest.checkpoints.contains_key("model"));
        assert_eq!(manifest.command, "pretrain+train+reconstruct+evaluate");
        assert!(manifest.timings.contains_key("train") && manifest.timings.contains_key("evaluate"));
        for f in [CONFIG_FILE, MANIFEST_FILE, METRICS_FILE, SUMMARY_FILE, "ablation.csv", "sweep.csv", "contrast.csv", "reconstruction.csv"] {
            assert!(run.join(f).exists(), "{f}");
        }
        assert_eq!(ExperimentConfig::load(run.join(CONFIG_FILE)).unwrap(), cfg);
        let sweep = fs::read_to_string(run.join("sweep.csv")).unwrap();
        assert_eq!(sweep.lines().count(), 1 + 2 + 1);
        assert!(sweep.lines().last().unwrap().starts_with("ensemble:250+500,"));

        let out = dir.path().join("report");
        cmd_report(&cfg, &out, &[run.clone()], None).unwrap();
        let table = fs::read_to_string(out.join("table.csv")).unwrap();
        assert!(!table.contains("p_dice"));
        assert!(table.contains("\nCDDPM+SSL+ENS,1,"));
        assert!(!out.join("pvalues.csv").exists());
        assert!(cmd_report(&cfg, &out, &[], None).is_err());
    }

    #[test]
    fn pretrained_init_without_checkpoint_fails() {
        let mut cfg = tiny_config();
        cfg.encoder_init = "pretrained".into();
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(cmd_train(&cfg, dir.path(), None, None), Err(Error::Config(_))));
    }
}
