//! Segmentation, reconstruction and distribution metrics, plus the
//! permutation test used to compare model variants.

use rand::seq::SliceRandom;

use crate::error::{bail, Error, Result};
use crate::seed;
use crate::volume::{BinaryMask, Volume};

/// `2|A∩B| / (|A|+|B|)`; two empty masks score 1.
pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    if pred.dims() != gt.dims() {
        bail!(DimensionMismatch, "{} vs {}", pred.dims(), gt.dims());
    }
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        a += p as usize;
        b += g as usize;
        inter += (p && g) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// Dice of two volumes that must hold only 0 and 1.
pub fn dice_volumes(pred: &Volume, gt: &Volume) -> Result<f64> {
    dice(&BinaryMask::from_volume(pred)?, &BinaryMask::from_volume(gt)?)
}

/// Precision-recall operating points, one per distinct score, in order of
/// decreasing threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    /// `(recall, precision)` pairs.
    pub points: Vec<(f64, f64)>,
}

impl PrCurve {
    /// `Σ (R_r − R_{r−1}) · P_r` with `R_0 = 0`.
    pub fn area(&self) -> f64 {
        let mut prev = 0.0;
        let mut area = 0.0;
        for &(r, p) in &self.points {
            area += (r - prev) * p;
            prev = r;
        }
        area
    }
}

pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<PrCurve> {
    if scores.len() != labels.len() {
        bail!(DimensionMismatch, "{} scores with {} labels", scores.len(), labels.len());
    }
    if scores.iter().any(|s| s.is_nan()) {
        bail!(InvalidArgument, "NaN score");
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(Error::UndefinedRecall);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        while k < order.len() && scores[order[k]] == s {
            if labels[order[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        points.push((tp as f64 / positives as f64, tp as f64 / (tp + fp) as f64));
    }
    Ok(PrCurve { points })
}

/// Area under the precision-recall curve over all voxels pooled.
pub fn auprc_values(scores: &[f64], labels: &[bool]) -> Result<f64> {
    Ok(pr_curve(scores, labels)?.area())
}

/// Pooled AUPRC over several volumes.
pub fn auprc(scores: &[&Volume], gts: &[&BinaryMask]) -> Result<f64> {
    if scores.len() != gts.len() || scores.is_empty() {
        bail!(InvalidArgument, "{} score maps with {} ground truths", scores.len(), gts.len());
    }
    let mut s = Vec::new();
    let mut l = Vec::new();
    for (v, g) in scores.iter().zip(gts) {
        v.ensure_same_dims(g.dims())?;
        s.extend_from_slice(v.data());
        l.extend_from_slice(g.data());
    }
    auprc_values(&s, &l)
}

const SSIM_WINDOW: usize = 7;
const SSIM_C1: f64 = 1e-4;
const SSIM_C2: f64 = 9e-4;

/// Mean structural similarity with a uniform `7³` window over all fully
/// contained window positions (sample covariance, data range 1). Volumes
/// thinner than the window use `7×7` windows on every slice instead.
pub fn ssim(a: &Volume, b: &Volume) -> Result<f64> {
    a.ensure_same_dims(b.dims())?;
    let d = a.dims();
    let k = SSIM_WINDOW;
    if d.h < k || d.w < k {
        bail!(InvalidArgument, "slices {}x{} smaller than the {k}x{k} window", d.h, d.w);
    }
    let kd = if d.d >= k { k } else { 1 };
    // Summed-volume tables of a, b, a², b², ab with a zero border.
    let (sd, sh, sw) = (d.d + 1, d.h + 1, d.w + 1);
    let idx = |z: usize, y: usize, x: usize| (z * sh + y) * sw + x;
    let mut tables = vec![[0.0f64; 5]; sd * sh * sw];
    for z in 0..d.d {
        for y in 0..d.h {
            for x in 0..d.w {
                let (va, vb) = (a.get(z, y, x), b.get(z, y, x));
                let v = [va, vb, va * va, vb * vb, va * vb];
                let mut out = [0.0; 5];
                for c in 0..5 {
                    out[c] = v[c] + tables[idx(z, y + 1, x + 1)][c] + tables[idx(z + 1, y, x + 1)][c]
                        + tables[idx(z + 1, y + 1, x)][c]
                        - tables[idx(z, y, x + 1)][c]
                        - tables[idx(z, y + 1, x)][c]
                        - tables[idx(z + 1, y, x)][c]
                        + tables[idx(z, y, x)][c];
                }
                tables[idx(z + 1, y + 1, x + 1)] = out;
            }
        }
    }
    let box_sum = |z: usize, y: usize, x: usize, c: usize| {
        let (z1, y1, x1) = (z + kd, y + k, x + k);
        tables[idx(z1, y1, x1)][c] - tables[idx(z, y1, x1)][c] - tables[idx(z1, y, x1)][c] - tables[idx(z1, y1, x)][c]
            + tables[idx(z, y, x1)][c]
            + tables[idx(z, y1, x)][c]
            + tables[idx(z1, y, x)][c]
            - tables[idx(z, y, x)][c]
    };
    let n = (kd * k * k) as f64;
    let cov_norm = n / (n - 1.0);
    let mut total = 0.0;
    let mut count = 0usize;
    for z in 0..=d.d - kd {
        for y in 0..=d.h - k {
            for x in 0..=d.w - k {
                let s: [f64; 5] = std::array::from_fn(|c| box_sum(z, y, x, c) / n);
                let (ma, mb) = (s[0], s[1]);
                let va = cov_norm * (s[2] - ma * ma);
                let vb = cov_norm * (s[3] - mb * mb);
                let cab = cov_norm * (s[4] - ma * mb);
                total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cab + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Peak signal-to-noise ratio for intensities in `[0, 1]`; identical
/// volumes give `+∞`.
pub fn psnr(a: &Volume, b: &Volume) -> Result<f64> {
    a.ensure_same_dims(b.dims())?;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.data().len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// Mean absolute reconstruction error inside the annotation and inside the
/// healthy part of the brain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct L1Errors {
    pub anomalous: f64,
    pub healthy: f64,
}

impl L1Errors {
    /// Anomalous over healthy error; `+∞` when the healthy error is zero.
    pub fn ratio(&self) -> f64 {
        if self.healthy == 0.0 {
            f64::INFINITY
        } else {
            self.anomalous / self.healthy
        }
    }
}

pub fn l1_errors(x0: &Volume, x0_rec: &Volume, annotation: &BinaryMask, brain: &BinaryMask) -> Result<L1Errors> {
    x0.ensure_same_dims(x0_rec.dims())?;
    x0.ensure_same_dims(annotation.dims())?;
    x0.ensure_same_dims(brain.dims())?;
    let (mut sa, mut na, mut sh, mut nh) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..x0.data().len() {
        let e = (x0.data()[i] - x0_rec.data()[i]).abs();
        if annotation.data()[i] {
            sa += e;
            na += 1;
        } else if brain.data()[i] {
            sh += e;
            nh += 1;
        }
    }
    if na == 0 {
        bail!(InvalidArgument, "annotation is empty");
    }
    if nh == 0 {
        bail!(InvalidArgument, "brain mask has no healthy voxels");
    }
    Ok(L1Errors {
        anomalous: sa / na as f64,
        healthy: sh / nh as f64,
    })
}

/// `L1Errors::ratio` in one call.
pub fn l1_ratio(x0: &Volume, x0_rec: &Volume, annotation: &BinaryMask, brain: &BinaryMask) -> Result<f64> {
    Ok(l1_errors(x0, x0_rec, annotation, brain)?.ratio())
}

pub const HISTOGRAM_BINS: usize = 500;
const KLD_EPS: f64 = 1e-10;

/// Density histogram over `[0, hi]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub hi: f64,
    pub densities: Vec<f64>,
}

impl Histogram {
    pub fn bin_width(&self) -> f64 {
        self.hi / self.densities.len() as f64
    }

    /// `Σ density · width`, 1 up to rounding.
    pub fn integral(&self) -> f64 {
        self.densities.iter().sum::<f64>() * self.bin_width()
    }
}

/// Density histogram of the voxels inside `mask` with `bins` bins over
/// `[0, hi]`; values at `hi` fall into the last bin, values outside the range
/// are clamped.
pub fn histogram(v: &Volume, mask: &BinaryMask, hi: f64, bins: usize) -> Result<Histogram> {
    v.ensure_same_dims(mask.dims())?;
    if bins == 0 || !(hi > 0.0) || !hi.is_finite() {
        bail!(InvalidArgument, "histogram needs bins > 0 and a positive range, got {bins} bins over [0, {hi}]");
    }
    let mut counts = vec![0usize; bins];
    let mut n = 0usize;
    for (&x, &m) in v.data().iter().zip(mask.data()) {
        if m {
            let b = ((x / hi) * bins as f64).floor().clamp(0.0, (bins - 1) as f64) as usize;
            counts[b] += 1;
            n += 1;
        }
    }
    if n == 0 {
        bail!(InvalidArgument, "histogram mask is empty");
    }
    let width = hi / bins as f64;
    Ok(Histogram {
        hi,
        densities: counts.iter().map(|&c| c as f64 / (n as f64 * width)).collect(),
    })
}

/// Histograms of an input and its reconstruction inside the brain, sharing
/// the range `[0, max]` over both.
pub fn histogram_pair(x0: &Volume, x0_rec: &Volume, brain: &BinaryMask) -> Result<(Histogram, Histogram)> {
    x0.ensure_same_dims(x0_rec.dims())?;
    x0.ensure_same_dims(brain.dims())?;
    if brain.count() == 0 {
        bail!(InvalidArgument, "brain mask is empty");
    }
    let hi = x0
        .data()
        .iter()
        .chain(x0_rec.data())
        .zip(brain.data().iter().chain(brain.data()))
        .filter(|(_, &m)| m)
        .map(|(&x, _)| x)
        .fold(0.0f64, f64::max);
    // A range of zero width would make densities undefined; every value is
    // 0 then and any positive range gives the same single-bin histogram.
    let hi = if hi > 0.0 { hi } else { 1.0 };
    Ok((
        histogram(x0, brain, hi, HISTOGRAM_BINS)?,
        histogram(x0_rec, brain, hi, HISTOGRAM_BINS)?,
    ))
}

/// `KL(p‖q) = Σ w (p+ε) ln((p+ε)/(q+ε))` over the shared binning.
pub fn kld(p: &Histogram, q: &Histogram) -> Result<f64> {
    if p.densities.len() != q.densities.len() || p.hi != q.hi {
        bail!(
            InvalidArgument,
            "histogram binnings differ: {} bins over [0, {}] vs {} bins over [0, {}]",
            p.densities.len(),
            p.hi,
            q.densities.len(),
            q.hi
        );
    }
    let w = p.bin_width();
    let sum: f64 = p
        .densities
        .iter()
        .zip(&q.densities)
        .map(|(&a, &b)| {
            let (a, b) = (a + KLD_EPS, b + KLD_EPS);
            a * (a / b).ln()
        })
        .sum();
    Ok(sum * w)
}

/// Two-sided approximate permutation test on the difference of means:
/// the fraction of random relabelings whose absolute mean difference is at
/// least the observed one.
pub fn permutation_test(a: &[f64], b: &[f64], rounds: usize, seed_value: u64) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        bail!(InvalidArgument, "permutation test needs two non-empty samples");
    }
    if rounds == 0 {
        bail!(InvalidArgument, "permutation test needs at least one round");
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let observed = (mean(a) - mean(b)).abs();
    let mut pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let mut rng = seed::rng(seed_value, &[seed::label("permutation")]);
    let tol = 1e-12 * observed.max(1.0);
    let mut hits = 0usize;
    for _ in 0..rounds {
        pooled.shuffle(&mut rng);
        let (x, y) = pooled.split_at(a.len());
        if (mean(x) - mean(y)).abs() >= observed - tol {
            hits += 1;
        }
    }
    Ok(hits as f64 / rounds as f64)
}

/// Arithmetic mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (m, 0.0);
    }
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

/// Metrics of one test volume.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeMetrics {
    pub id: String,
    pub dice: f64,
    pub auprc: Option<f64>,
    pub ssim: f64,
    pub psnr: f64,
    pub l1_anomalous: Option<f64>,
    pub l1_healthy: Option<f64>,
    pub l1_ratio: Option<f64>,
    pub kld: f64,
}

/// Per-volume metrics plus the threshold that produced the segmentations
/// and the pooled AUPRC.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub threshold: f64,
    pub pooled_auprc: Option<f64>,
    pub volumes: Vec<VolumeMetrics>,
}

pub const METRIC_COLUMNS: [&str; 8] = ["dice", "auprc", "ssim", "psnr", "l1_anomalous", "l1_healthy", "l1_ratio", "kld"];

fn fmt(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.6}")
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_default()
}

impl VolumeMetrics {
    fn values(&self) -> [Option<f64>; 8] {
        [
            Some(self.dice),
            self.auprc,
            Some(self.ssim),
            Some(self.psnr),
            self.l1_anomalous,
            self.l1_healthy,
            self.l1_ratio,
            Some(self.kld),
        ]
    }
}

impl MetricReport {
    /// One row per volume; missing values are empty cells.
    pub fn per_volume_csv(&self) -> String {
        let mut s = format!("id,{}\n", METRIC_COLUMNS.join(","));
        for v in &self.volumes {
            let cells: Vec<String> = v.values().iter().map(|&x| fmt_opt(x)).collect();
            s.push_str(&format!("{},{}\n", v.id, cells.join(",")));
        }
        s
    }

    /// Mean and standard deviation of every metric over the volumes that
    /// define it (finite values only).
    pub fn summary(&self) -> Vec<(String, f64, f64)> {
        let mut out = Vec::new();
        for (c, name) in METRIC_COLUMNS.iter().enumerate() {
            let vals: Vec<f64> = self
                .volumes
                .iter()
                .filter_map(|v| v.values()[c])
                .filter(|x| x.is_finite())
                .collect();
            let (m, s) = mean_std(&vals);
            out.push((name.to_string(), m, s));
        }
        out
    }

    /// `metric,mean,std` rows plus the threshold and pooled AUPRC.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("metric,mean,std\n");
        s.push_str(&format!("threshold,{},\n", fmt(self.threshold)));
        s.push_str(&format!("pooled_auprc,{},\n", fmt_opt(self.pooled_auprc)));
        for (name, m, sd) in self.summary() {
            s.push_str(&format!("{name},{},{}\n", fmt(m), fmt(sd)));
        }
        s
    }
}

/// Aggregate one statistic across runs (e.g. seeds) as `mean ± std`.
pub fn format_mean_std(values: &[f64]) -> String {
    let (m, s) = mean_std(values);
    format!("{m:.4} ± {s:.4}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Dims;
    use rand::Rng;

    fn dims(d: usize, h: usize, w: usize) -> Dims {
        Dims::new(d, h, w).unwrap()
    }

    #[test]
    fn dice_examples() {
        let d = dims(1, 1, 10);
        let a = BinaryMask::from_fn(d, |_, _, x| x < 4);
        let b = BinaryMask::from_fn(d, |_, _, x| (1..7).contains(&x));
        assert!((dice(&a, &b).unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&BinaryMask::empty(d), &BinaryMask::empty(d)).unwrap(), 1.0);
        assert_eq!(dice(&a, &BinaryMask::empty(d)).unwrap(), 0.0);
        let half = a.to_volume().map(|x| x * 0.5).unwrap();
        assert!(matches!(dice_volumes(&half, &b.to_volume()), Err(Error::NonBinary(_))));
        assert!(dice(&a, &BinaryMask::empty(dims(1, 2, 5))).is_err());
    }

    #[test]
    fn auprc_examples() {
        let labels = [true, false, true, false];
        assert_eq!(auprc_values(&[0.9, 0.1, 0.8, 0.2], &labels).unwrap(), 1.0);
        assert_eq!(auprc_values(&[0.5; 4], &labels).unwrap(), 0.5);
        assert!(matches!(auprc_values(&[0.1, 0.2], &[false, false]), Err(Error::UndefinedRecall)));
        // Ranking: T F T F -> points (0.5,1), (0.5,0.5), (1,2/3), (1,0.5).
        let a = auprc_values(&[0.9, 0.8, 0.7, 0.6], &labels).unwrap();
        assert!((a - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn ssim_examples() {
        let d = dims(8, 9, 9);
        let mut rng = crate::seed::rng(1, &[]);
        let a = Volume::from_fn(d, |_, _, _| rng.random::<f64>()).unwrap();
        let b = a.map(|x| 1.0 - x).unwrap();
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        assert!(ssim(&a, &b).unwrap() < 0.0);
        let thin = dims(2, 7, 7);
        let t = Volume::filled(thin, 0.3);
        assert!((ssim(&t, &t).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim(&Volume::zeros(dims(2, 6, 9)), &Volume::zeros(dims(2, 6, 9))).is_err());
    }

    #[test]
    fn psnr_examples() {
        let d = dims(2, 3, 4);
        let a = Volume::filled(d, 0.5);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert!((psnr(&a, &Volume::filled(d, 0.6)).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn l1_ratio_examples() {
        let d = dims(1, 2, 2);
        let x0 = Volume::new(d, vec![1.0, 0.5, 0.5, 0.0]).unwrap();
        let rec = Volume::new(d, vec![0.2, 0.4, 0.6, 0.0]).unwrap();
        let ann = BinaryMask::new(d, vec![true, false, false, false]).unwrap();
        let brain = BinaryMask::new(d, vec![true, true, true, false]).unwrap();
        let e = l1_errors(&x0, &rec, &ann, &brain).unwrap();
        assert!((e.anomalous - 0.8).abs() < 1e-12);
        assert!((e.healthy - 0.1).abs() < 1e-12);
        assert!((e.ratio() - 8.0).abs() < 1e-9);
        assert!(l1_ratio(&x0, &rec, &BinaryMask::empty(d), &brain).is_err());
    }

    #[test]
    fn histogram_and_kld() {
        let d = dims(2, 8, 8);
        let mut rng = crate::seed::rng(2, &[]);
        let a = Volume::from_fn(d, |_, _, _| rng.random::<f64>()).unwrap();
        let b = a.map(|x| x * 0.5).unwrap();
        let brain = BinaryMask::from_fn(d, |_, y, _| y > 0);
        let (ha, hb) = histogram_pair(&a, &b, &brain).unwrap();
        assert!((ha.integral() - 1.0).abs() < 1e-9);
        assert!((hb.integral() - 1.0).abs() < 1e-9);
        assert_eq!(ha.densities.len(), HISTOGRAM_BINS);
        assert_eq!(kld(&ha, &ha).unwrap(), 0.0);
        assert!(kld(&ha, &hb).unwrap() > 0.0);
        let other = histogram(&a, &brain, 2.0, HISTOGRAM_BINS).unwrap();
        assert!(kld(&ha, &other).is_err());
        assert!(histogram_pair(&a, &b, &BinaryMask::empty(d)).is_err());
    }

    #[test]
    fn permutation_examples() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(permutation_test(&a, &a, 500, 1).unwrap(), 1.0);
        let lo: Vec<f64> = (0..20).map(|i| i as f64 * 0.01).collect();
        let hi: Vec<f64> = (0..20).map(|i| 10.0 + i as f64 * 0.01).collect();
        assert!(permutation_test(&lo, &hi, 1000, 1).unwrap() < 0.01);
        assert_eq!(permutation_test(&lo, &hi, 1000, 7).unwrap(), permutation_test(&lo, &hi, 1000, 7).unwrap());
        assert!(permutation_test(&[], &hi, 10, 1).is_err());
    }

    #[test]
    fn report_csv() {
        let r = MetricReport {
            threshold: 0.25,
            pooled_auprc: Some(0.5),
            volumes: vec![
                VolumeMetrics {
                    id: "a".into(),
                    dice: 0.5,
                    auprc: Some(0.4),
                    ssim: 0.9,
                    psnr: 30.0,
                    l1_anomalous: Some(0.2),
                    l1_healthy: Some(0.05),
                    l1_ratio: Some(4.0),
                    kld: 0.1,
                },
                VolumeMetrics {
                    id: "b".into(),
                    dice: 0.7,
                    auprc: None,
                    ssim: 0.8,
                    psnr: f64::INFINITY,
                    l1_anomalous: None,
                    l1_healthy: None,
                    l1_ratio: None,
                    kld: 0.3,
                },
            ],
        };
        let csv = r.per_volume_csv();
        assert!(csv.starts_with("id,dice,auprc,"));
        assert!(csv.contains("b,0.700000,,0.800000,inf,,,,0.300000"));
        let summary = r.summary();
        assert!((summary[0].1 - 0.6).abs() < 1e-12);
        assert_eq!(summary[3].1, 30.0);
        assert!(r.summary_csv().contains("threshold,0.250000"));
    }
}
