//! Synthetic brain-like phantoms with injected lesions.
//!
//! A phantom is an in-plane rotated ellipsoid on a zero background. Inside it
//! there is a "cortex" rim and a "white matter" core whose intensities are
//! drawn per subject, a bright central "ventricle" ellipsoid, and a smooth
//! value-noise texture. Lesions are spheres with a constant intensity offset.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{bail, Error, Result};
use crate::seed;
use crate::volume::{normalize_volume, BinaryMask, Dims, Volume};

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub dims: Dims,
    /// Range of the in-plane semi-axes, in voxels.
    pub axis_xy: (f64, f64),
    /// Range of the semi-axis along D, in voxels.
    pub axis_z: (f64, f64),
    /// Range for the rim and core tissue intensities, relative to the ventricles (1.0).
    pub tissue_intensity: (f64, f64),
    pub texture_amplitude: f64,
    /// Lattice spacing of the value noise, in voxels.
    pub texture_scale: f64,
    pub anomaly_count: usize,
    pub anomaly_radius: (f64, f64),
    /// Additive offset of lesion voxels; positive is hyperintense.
    pub anomaly_offset: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: Dims { d: 8, h: 32, w: 32 },
            axis_xy: (10.0, 14.0),
            axis_z: (5.0, 7.0),
            tissue_intensity: (0.35, 0.65),
            texture_amplitude: 0.06,
            texture_scale: 6.0,
            anomaly_count: 0,
            anomaly_radius: (2.5, 3.5),
            anomaly_offset: 0.35,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.axis_xy;
        let (zlo, zhi) = self.axis_z;
        if lo <= 1.0 || zlo <= 1.0 {
            bail!(InvalidArgument, "degenerate ellipsoid axes (must exceed 1 voxel)");
        }
        if hi < lo || zhi < zlo {
            bail!(InvalidArgument, "empty axis range");
        }
        let (rlo, rhi) = self.anomaly_radius;
        if rlo <= 0.0 || rhi < rlo {
            bail!(InvalidArgument, "invalid anomaly radius range");
        }
        if rhi >= lo.min(zlo) {
            bail!(InvalidArgument, "anomaly radius must be below the smallest ellipsoid axis");
        }
        let (tlo, thi) = self.tissue_intensity;
        if !(0.0 < tlo && tlo <= thi && thi <= 1.0) {
            bail!(InvalidArgument, "tissue intensity range must lie in (0, 1]");
        }
        if self.texture_scale <= 0.0 || self.texture_amplitude < 0.0 {
            bail!(InvalidArgument, "invalid texture parameters");
        }
        if !self.anomaly_offset.is_finite() || self.anomaly_offset.abs() > 1.0 {
            bail!(InvalidArgument, "anomaly offset must lie in [-1, 1]");
        }
        Ok(())
    }
}

/// Trilinear value noise with smoothstep weights on a random lattice.
struct ValueNoise {
    spacing: f64,
    shape: (usize, usize, usize),
    lattice: Vec<f64>,
}

impl ValueNoise {
    fn new(dims: Dims, spacing: f64, rng: &mut impl Rng) -> Self {
        let n = |len: usize| (len as f64 / spacing).ceil() as usize + 2;
        let shape = (n(dims.d), n(dims.h), n(dims.w));
        let lattice = (0..shape.0 * shape.1 * shape.2)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Self {
            spacing,
            shape,
            lattice,
        }
    }

    fn at(&self, z: f64, y: f64, x: f64) -> f64 {
        let fade = |t: f64| t * t * (3.0 - 2.0 * t);
        let (gz, gy, gx) = (z / self.spacing, y / self.spacing, x / self.spacing);
        let (iz, iy, ix) = (gz.floor() as usize, gy.floor() as usize, gx.floor() as usize);
        let (tz, ty, tx) = (fade(gz.fract()), fade(gy.fract()), fade(gx.fract()));
        let l = |a: usize, b: usize, c: usize| self.lattice[(a * self.shape.1 + b) * self.shape.2 + c];
        let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
        let plane = |a: usize| {
            lerp(
                lerp(l(a, iy, ix), l(a, iy, ix + 1), tx),
                lerp(l(a, iy + 1, ix), l(a, iy + 1, ix + 1), tx),
                ty,
            )
        };
        lerp(plane(iz), plane(iz + 1), tz)
    }
}

fn smooth_step_edge(r: f64, edge: f64, width: f64) -> f64 {
    1.0 / (1.0 + (-(r - edge) / width).exp())
}

/// Generate a healthy phantom and its brain mask; lesions are not added here.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, BinaryMask)> {
    spec.validate()?;
    let dims = spec.dims;
    let mut rng = seed::rng(spec.seed, &[seed::label("phantom")]);
    let a = rng.random_range(spec.axis_xy.0..=spec.axis_xy.1);
    let b = rng.random_range(spec.axis_xy.0..=spec.axis_xy.1);
    let c = rng.random_range(spec.axis_z.0..=spec.axis_z.1);
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let cz = (dims.d as f64 - 1.0) / 2.0;
    let cy = (dims.h as f64 - 1.0) / 2.0 + rng.random_range(-1.0..=1.0);
    let cx = (dims.w as f64 - 1.0) / 2.0 + rng.random_range(-1.0..=1.0);
    let rim = rng.random_range(spec.tissue_intensity.0..=spec.tissue_intensity.1);
    let core = rng.random_range(spec.tissue_intensity.0..=spec.tissue_intensity.1);
    let rim_edge = rng.random_range(0.7..0.85);
    let vent = (rng.random_range(0.22..0.32), rng.random_range(0.22..0.32));
    let noise = ValueNoise::new(dims, spec.texture_scale, &mut rng);
    let (sin, cos) = theta.sin_cos();

    let mut mask = BinaryMask::empty(dims);
    let mut data = vec![0.0; dims.len()];
    for z in 0..dims.d {
        for y in 0..dims.h {
            for x in 0..dims.w {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let u = cos * dx + sin * dy;
                let v = -sin * dx + cos * dy;
                let dz = (z as f64 - cz) / c;
                let rho = ((u / a).powi(2) + (v / b).powi(2) + dz * dz).sqrt();
                if rho > 1.0 {
                    continue;
                }
                let i = dims.index(z, y, x);
                mask.data_mut()[i] = true;
                let rv = ((u / (a * vent.0)).powi(2) + (v / (b * vent.1)).powi(2) + dz * dz).sqrt();
                let tissue = core + (rim - core) * smooth_step_edge(rho, rim_edge, 0.04);
                let base = tissue + (1.0 - tissue) * (1.0 - smooth_step_edge(rv, 1.0, 0.08));
                let tex = spec.texture_amplitude * noise.at(z as f64, y as f64, x as f64);
                data[i] = (base + tex).max(0.0);
            }
        }
    }
    let vol = normalize_volume(&Volume::new(dims, data)?, 0.98)?;
    Ok((vol, mask))
}

/// Add `spec.anomaly_count` spherical lesions that lie fully inside the brain.
///
/// The annotation marks exactly the voxels whose value was offset (before
/// clamping to [0, 1]).
pub fn inject_anomaly(
    v: &Volume,
    brain: &BinaryMask,
    spec: &PhantomSpec,
) -> Result<(Volume, BinaryMask)> {
    spec.validate()?;
    let dims = v.dims();
    v.ensure_same_dims(brain.dims())?;
    let mut annotation = BinaryMask::empty(dims);
    if spec.anomaly_offset == 0.0 || spec.anomaly_count == 0 {
        return Ok((v.clone(), annotation));
    }
    let inside: Vec<usize> = (0..dims.len()).filter(|&i| brain.data()[i]).collect();
    if inside.is_empty() {
        return Err(Error::AnomalyDoesNotFit);
    }
    let mut rng = seed::rng(spec.seed, &[seed::label("anomaly")]);
    for _ in 0..spec.anomaly_count {
        let mut placed = false;
        for _attempt in 0..500 {
            let r = rng.random_range(spec.anomaly_radius.0..=spec.anomaly_radius.1);
            let (z0, y0, x0) = dims.coords(inside[rng.random_range(0..inside.len())]);
            let jitter = |rng: &mut rand_chacha::ChaCha8Rng| rng.random_range(-0.5..0.5);
            let centre = (
                z0 as f64 + jitter(&mut rng),
                y0 as f64 + jitter(&mut rng),
                x0 as f64 + jitter(&mut rng),
            );
            if let Some(voxels) = sphere_inside(dims, brain, centre, r) {
                for i in voxels {
                    annotation.data_mut()[i] = true;
                }
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::AnomalyDoesNotFit);
        }
    }
    let data = v
        .data()
        .iter()
        .zip(annotation.data())
        .map(|(&x, &hit)| if hit { (x + spec.anomaly_offset).clamp(0.0, 1.0) } else { x })
        .collect();
    Ok((Volume::new(dims, data)?, annotation))
}

/// Voxels of a sphere, or `None` if any of them leaves the volume or the brain.
fn sphere_inside(
    dims: Dims,
    brain: &BinaryMask,
    (cz, cy, cx): (f64, f64, f64),
    r: f64,
) -> Option<Vec<usize>> {
    let span = |c: f64| ((c - r).floor() as i64, (c + r).ceil() as i64);
    let (z0, z1) = span(cz);
    let (y0, y1) = span(cy);
    let (x0, x1) = span(cx);
    let mut voxels = Vec::new();
    for z in z0..=z1 {
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d2 = (z as f64 - cz).powi(2) + (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                if d2 > r * r {
                    continue;
                }
                if z < 0 || y < 0 || x < 0 {
                    return None;
                }
                let (z, y, x) = (z as usize, y as usize, x as usize);
                if z >= dims.d || y >= dims.h || x >= dims.w || !brain.get(z, y, x) {
                    return None;
                }
                voxels.push(dims.index(z, y, x));
            }
        }
    }
    (!voxels.is_empty()).then_some(voxels)
}

/// Identifier lists of the five data splits.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetSplit {
    pub healthy_train: Vec<String>,
    pub healthy_val: Vec<String>,
    pub healthy_test: Vec<String>,
    pub unhealthy_val: Vec<String>,
    pub unhealthy_test: Vec<String>,
}

impl DatasetSplit {
    pub fn groups(&self) -> [(&'static str, &Vec<String>); 5] {
        [
            ("healthy_train", &self.healthy_train),
            ("healthy_val", &self.healthy_val),
            ("healthy_test", &self.healthy_test),
            ("unhealthy_val", &self.unhealthy_val),
            ("unhealthy_test", &self.unhealthy_test),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (_, ids) in self.groups() {
            for id in ids {
                if !seen.insert(id) {
                    bail!(Config, "identifier {id} appears in more than one split");
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Subject {
    pub id: String,
    pub volume: Volume,
    pub brain: BinaryMask,
    pub annotation: Option<BinaryMask>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub phantom: PhantomSpec,
    pub healthy_train: usize,
    pub healthy_val: usize,
    pub healthy_test: usize,
    pub unhealthy_val: usize,
    pub unhealthy_test: usize,
    /// Lesions per unhealthy subject are drawn uniformly from `1..=max_anomalies`.
    pub max_anomalies: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            phantom: PhantomSpec::default(),
            healthy_train: 100,
            healthy_val: 10,
            healthy_test: 10,
            unhealthy_val: 10,
            unhealthy_test: 20,
            max_anomalies: 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub split: DatasetSplit,
    pub subjects: BTreeMap<String, Subject>,
}

impl Dataset {
    pub fn get(&self, id: &str) -> Result<&Subject> {
        self.subjects
            .get(id)
            .ok_or_else(|| Error::Config(format!("unknown subject {id}")))
    }

    pub fn subjects_of<'a>(&'a self, ids: &'a [String]) -> Result<Vec<&'a Subject>> {
        ids.iter().map(|id| self.get(id)).collect()
    }
}

/// Build the full synthetic dataset; every subject has its own derived seed.
pub fn synthetic_dataset(spec: &DatasetSpec, base_seed: u64) -> Result<Dataset> {
    let mut split = DatasetSplit::default();
    let mut subjects = BTreeMap::new();
    let groups: [(&str, usize, bool); 5] = [
        ("healthy_train", spec.healthy_train, false),
        ("healthy_val", spec.healthy_val, false),
        ("healthy_test", spec.healthy_test, false),
        ("unhealthy_val", spec.unhealthy_val, true),
        ("unhealthy_test", spec.unhealthy_test, true),
    ];
    for (group, count, unhealthy) in groups {
        for k in 0..count {
            let id = format!("{group}_{k:03}");
            let mut p = spec.phantom.clone();
            p.seed = seed::derive(base_seed, &[seed::label(&id)]);
            let (volume, brain) = generate_phantom(&p)?;
            let (volume, annotation) = if unhealthy {
                let mut rng = seed::rng(p.seed, &[seed::label("count")]);
                p.anomaly_count = rng.random_range(1..=spec.max_anomalies.max(1));
                let (v, a) = inject_anomaly(&volume, &brain, &p)?;
                (v, Some(a))
            } else {
                (volume, None)
            };
            let list = match group {
                "healthy_train" => &mut split.healthy_train,
                "healthy_val" => &mut split.healthy_val,
                "healthy_test" => &mut split.healthy_test,
                "unhealthy_val" => &mut split.unhealthy_val,
                _ => &mut split.unhealthy_test,
            };
            list.push(id.clone());
            subjects.insert(
                id.clone(),
                Subject {
                    id,
                    volume,
                    brain,
                    annotation,
                },
            );
        }
    }
    split.validate()?;
    Ok(Dataset { split, subjects })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn big_spec() -> PhantomSpec {
        PhantomSpec {
            dims: Dims::new(32, 40, 40).unwrap(),
            axis_xy: (12.0, 15.0),
            axis_z: (10.0, 12.0),
            anomaly_radius: (4.0, 4.0),
            seed: 9,
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn same_seed_same_phantom() {
        let spec = PhantomSpec {
            seed: 42,
            ..PhantomSpec::default()
        };
        assert_eq!(generate_phantom(&spec).unwrap(), generate_phantom(&spec).unwrap());
        let other = PhantomSpec { seed: 43, ..spec.clone() };
        assert_ne!(generate_phantom(&other).unwrap().0, generate_phantom(&spec).unwrap().0);
    }

    #[test]
    fn phantom_is_normalized_with_zero_background() {
        let (v, mask) = generate_phantom(&PhantomSpec::default()).unwrap();
        let (lo, hi) = v.min_max();
        assert!(lo >= 0.0 && hi <= 1.0 && (hi - 1.0).abs() < 1e-12);
        for (x, m) in v.data().iter().zip(mask.data()) {
            if !m {
                assert_eq!(*x, 0.0);
            }
        }
    }

    #[test]
    fn mask_volume_matches_ellipsoid() {
        // Recover the drawn axes by replaying the generator's rng prefix.
        let spec = big_spec();
        let (_, mask) = generate_phantom(&spec).unwrap();
        let mut rng = seed::rng(spec.seed, &[seed::label("phantom")]);
        let a: f64 = rng.random_range(spec.axis_xy.0..=spec.axis_xy.1);
        let b: f64 = rng.random_range(spec.axis_xy.0..=spec.axis_xy.1);
        let c: f64 = rng.random_range(spec.axis_z.0..=spec.axis_z.1);
        let analytic = 4.0 / 3.0 * std::f64::consts::PI * a * b * c;
        let count = mask.count() as f64;
        assert!((count - analytic).abs() / analytic < 0.10, "{count} vs {analytic}");
    }

    #[test]
    fn degenerate_axes_are_rejected() {
        let spec = PhantomSpec {
            axis_xy: (0.5, 1.0),
            ..PhantomSpec::default()
        };
        assert!(generate_phantom(&spec).is_err());
    }

    #[test]
    fn zero_offset_or_count_leaves_volume_untouched() {
        let spec = PhantomSpec {
            anomaly_count: 2,
            anomaly_offset: 0.0,
            ..PhantomSpec::default()
        };
        let (v, brain) = generate_phantom(&spec).unwrap();
        let (w, ann) = inject_anomaly(&v, &brain, &spec).unwrap();
        assert_eq!(ann.count(), 0);
        assert_eq!(v, w);
        let spec = PhantomSpec {
            anomaly_count: 0,
            ..spec
        };
        assert_eq!(inject_anomaly(&v, &brain, &spec).unwrap().1.count(), 0);
    }

    #[test]
    fn single_blob_matches_sphere_volume() {
        let spec = PhantomSpec {
            anomaly_count: 1,
            ..big_spec()
        };
        let (v, brain) = generate_phantom(&spec).unwrap();
        let (_, ann) = inject_anomaly(&v, &brain, &spec).unwrap();
        let analytic = 4.0 / 3.0 * std::f64::consts::PI * 64.0;
        let count = ann.count() as f64;
        assert!((count - analytic).abs() / analytic < 0.15, "{count} vs {analytic}");
    }

    #[test]
    fn annotation_is_exactly_the_changed_voxels() {
        let spec = PhantomSpec {
            anomaly_count: 2,
            anomaly_offset: 0.3,
            seed: 5,
            ..PhantomSpec::default()
        };
        let (v, brain) = generate_phantom(&spec).unwrap();
        let (w, ann) = inject_anomaly(&v, &brain, &spec).unwrap();
        assert!(ann.count() > 0);
        assert!(ann.is_subset_of(&brain));
        for i in 0..v.data().len() {
            let (before, after) = (v.data()[i], w.data()[i]);
            if ann.data()[i] {
                assert_eq!(after, (before + 0.3).clamp(0.0, 1.0));
            } else {
                assert_eq!(after, before);
            }
        }
    }

    #[test]
    fn oversized_anomaly_is_rejected() {
        let spec = PhantomSpec {
            dims: Dims::new(8, 32, 32).unwrap(),
            axis_z: (4.6, 4.8),
            anomaly_radius: (4.5, 4.5),
            anomaly_count: 1,
            ..PhantomSpec::default()
        };
        let (v, brain) = generate_phantom(&spec).unwrap();
        assert!(matches!(inject_anomaly(&v, &brain, &spec), Err(Error::AnomalyDoesNotFit)));
    }

    #[test]
    fn dataset_splits_are_disjoint_and_annotated() {
        let spec = DatasetSpec {
            healthy_train: 3,
            healthy_val: 1,
            healthy_test: 1,
            unhealthy_val: 2,
            unhealthy_test: 2,
            ..DatasetSpec::default()
        };
        let ds = synthetic_dataset(&spec, 7).unwrap();
        ds.split.validate().unwrap();
        assert_eq!(ds.subjects.len(), 9);
        for id in ds.split.unhealthy_test.iter().chain(&ds.split.unhealthy_val) {
            assert!(ds.get(id).unwrap().annotation.as_ref().unwrap().count() > 0);
        }
        for id in &ds.split.healthy_train {
            assert!(ds.get(id).unwrap().annotation.is_none());
        }
    }
}
