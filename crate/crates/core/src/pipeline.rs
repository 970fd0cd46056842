//! Residual maps and the post-processing chain that turns them into binary
//! anomaly segmentations: median filtering, eroded brain masking,
//! thresholding and small-component removal.

use std::collections::VecDeque;

use crate::error::{bail, Result};
use crate::metrics::dice;
use crate::volume::{percentile_value, BinaryMask, Dims, Volume};

/// Neighbourhood used for connected components.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    /// Face neighbours only.
    Six,
    /// Face, edge and corner neighbours.
    TwentySix,
}

impl Connectivity {
    fn offsets(self) -> Vec<(isize, isize, isize)> {
        let mut out = Vec::new();
        for dz in -1..=1isize {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let n = dz.abs() + dy.abs() + dx.abs();
                    let keep = match self {
                        Self::Six => n == 1,
                        Self::TwentySix => n >= 1,
                    };
                    if keep {
                        out.push((dz, dy, dx));
                    }
                }
            }
        }
        out
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Six => "6",
            Self::TwentySix => "26",
        }
    }
}

impl std::str::FromStr for Connectivity {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "6" => Ok(Self::Six),
            "26" => Ok(Self::TwentySix),
            other => Err(crate::Error::Unknown {
                kind: "connectivity",
                name: other.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PostProcConfig {
    /// Edge length of the cubic median window; odd.
    pub median_kernel: usize,
    pub erosion_iterations: usize,
    /// Components with fewer voxels are removed.
    pub min_component_size: usize,
    pub connectivity: Connectivity,
    /// Number of thresholds in the search grid.
    pub grid_size: usize,
    /// Grid bounds as fractions (percentiles / 100) of pooled validation
    /// scores inside the brain.
    pub grid_low: f64,
    pub grid_high: f64,
    pub median_filter: bool,
    pub brain_erosion: bool,
    pub component_filter: bool,
}

impl Default for PostProcConfig {
    fn default() -> Self {
        Self {
            median_kernel: 5,
            erosion_iterations: 3,
            min_component_size: 7,
            connectivity: Connectivity::TwentySix,
            grid_size: 100,
            grid_low: 0.5,
            grid_high: 1.0,
            median_filter: true,
            brain_erosion: true,
            component_filter: true,
        }
    }
}

impl PostProcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.median_kernel % 2 == 0 {
            bail!(Config, "median kernel must be odd, got {}", self.median_kernel);
        }
        if self.grid_size == 0 {
            bail!(Config, "threshold grid must have at least one value");
        }
        if !(0.0..=1.0).contains(&self.grid_low) || !(self.grid_low..=1.0).contains(&self.grid_high) {
            bail!(Config, "grid bounds {}..{} must satisfy 0 <= low <= high <= 1", self.grid_low, self.grid_high);
        }
        Ok(())
    }

    /// Stage toggles as a short label, e.g. `MF+BE+CC` or `none`.
    pub fn stages_label(&self) -> String {
        let parts: Vec<&str> = [
            (self.median_filter, "MF"),
            (self.brain_erosion, "BE"),
            (self.component_filter, "CC"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

/// `|x0 - x0_rec|` voxelwise.
pub fn residual(x0: &Volume, x0_rec: &Volume) -> Result<Volume> {
    x0.ensure_same_dims(x0_rec.dims())?;
    let data = x0.data().iter().zip(x0_rec.data()).map(|(a, b)| (a - b).abs()).collect();
    Volume::new(x0.dims(), data)
}

/// Median over a cubic `kernel³` window with edge replication.
pub fn median_filter_3d(v: &Volume, kernel: usize) -> Result<Volume> {
    if kernel % 2 == 0 {
        bail!(InvalidArgument, "median kernel must be odd, got {kernel}");
    }
    let dims = v.dims();
    let r = (kernel / 2) as isize;
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut window = Vec::with_capacity(kernel.pow(3));
    let mid = kernel.pow(3) / 2;
    Volume::from_fn(dims, |z, y, x| {
        window.clear();
        for dz in -r..=r {
            let zz = clamp(z as isize + dz, dims.d);
            for dy in -r..=r {
                let yy = clamp(y as isize + dy, dims.h);
                for dx in -r..=r {
                    window.push(v.get(zz, yy, clamp(x as isize + dx, dims.w)));
                }
            }
        }
        *window.select_nth_unstable_by(mid, f64::total_cmp).1
    })
}

/// Iterated erosion with the 6-neighbour cross. Voxels outside the volume
/// count as foreground, so a mask touching the volume border is only eroded
/// from its interior boundary.
pub fn erode_mask(mask: &BinaryMask, iterations: usize) -> BinaryMask {
    let dims = mask.dims();
    let offsets = Connectivity::Six.offsets();
    let mut cur = mask.clone();
    for _ in 0..iterations {
        let prev = cur.clone();
        cur = BinaryMask::from_fn(dims, |z, y, x| {
            prev.get(z, y, x)
                && offsets.iter().all(|&(dz, dy, dx)| match neighbour(dims, (z, y, x), (dz, dy, dx)) {
                    Some((nz, ny, nx)) => prev.get(nz, ny, nx),
                    None => true,
                })
        });
    }
    cur
}

fn neighbour(dims: Dims, (z, y, x): (usize, usize, usize), (dz, dy, dx): (isize, isize, isize)) -> Option<(usize, usize, usize)> {
    let nz = z as isize + dz;
    let ny = y as isize + dy;
    let nx = x as isize + dx;
    if nz < 0 || ny < 0 || nx < 0 || nz >= dims.d as isize || ny >= dims.h as isize || nx >= dims.w as isize {
        None
    } else {
        Some((nz as usize, ny as usize, nx as usize))
    }
}

/// Voxels `>= theta`.
pub fn binarize(v: &Volume, theta: f64) -> Result<BinaryMask> {
    if theta.is_nan() {
        bail!(InvalidArgument, "threshold is NaN");
    }
    BinaryMask::new(v.dims(), v.data().iter().map(|&x| x >= theta).collect())
}

/// Zero every voxel outside `mask`.
pub fn apply_mask(v: &Volume, mask: &BinaryMask) -> Result<Volume> {
    v.ensure_same_dims(mask.dims())?;
    let data = v.data().iter().zip(mask.data()).map(|(&x, &m)| if m { x } else { 0.0 }).collect();
    Volume::new(v.dims(), data)
}

/// Component label (1-based, 0 = background) of every voxel and the size of
/// each component, in raster order of first voxel.
pub fn label_components(mask: &BinaryMask, connectivity: Connectivity) -> (Vec<usize>, Vec<usize>) {
    let dims = mask.dims();
    let offsets = connectivity.offsets();
    let mut labels = vec![0usize; dims.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..dims.len() {
        if !mask.data()[start] || labels[start] != 0 {
            continue;
        }
        let label = sizes.len() + 1;
        let mut size = 0;
        labels[start] = label;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            size += 1;
            let p = dims.coords(i);
            for &o in &offsets {
                if let Some((z, y, x)) = neighbour(dims, p, o) {
                    let j = dims.index(z, y, x);
                    if mask.data()[j] && labels[j] == 0 {
                        labels[j] = label;
                        queue.push_back(j);
                    }
                }
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

/// Remove components with fewer than `min_size` voxels.
pub fn connected_component_filter(mask: &BinaryMask, min_size: usize, connectivity: Connectivity) -> BinaryMask {
    let (labels, sizes) = label_components(mask, connectivity);
    let data = labels.iter().map(|&l| l > 0 && sizes[l - 1] >= min_size).collect();
    BinaryMask::new(mask.dims(), data).expect("same dims as input")
}

/// The threshold-independent part of the chain: residual, median filter
/// and eroded brain masking, each if enabled.
pub fn score_map(x0: &Volume, x0_rec: &Volume, brain: &BinaryMask, cfg: &PostProcConfig) -> Result<Volume> {
    cfg.validate()?;
    x0.ensure_same_dims(brain.dims())?;
    let mut r = residual(x0, x0_rec)?;
    if cfg.median_filter {
        r = median_filter_3d(&r, cfg.median_kernel)?;
    }
    if cfg.brain_erosion {
        r = apply_mask(&r, &erode_mask(brain, cfg.erosion_iterations))?;
    }
    Ok(r)
}

/// The threshold-dependent part: binarize, then drop small components if
/// enabled.
pub fn segment(score: &Volume, theta: f64, cfg: &PostProcConfig) -> Result<BinaryMask> {
    let m = binarize(score, theta)?;
    Ok(if cfg.component_filter {
        connected_component_filter(&m, cfg.min_component_size, cfg.connectivity)
    } else {
        m
    })
}

/// Full chain from an input and its reconstruction to a binary prediction.
pub fn run_pipeline(
    x0: &Volume,
    x0_rec: &Volume,
    brain: &BinaryMask,
    cfg: &PostProcConfig,
    theta: f64,
) -> Result<BinaryMask> {
    segment(&score_map(x0, x0_rec, brain, cfg)?, theta, cfg)
}

/// `cfg.grid_size` evenly spaced thresholds between two percentiles of the
/// pooled in-brain scores. Duplicate values collapse, so a degenerate score
/// distribution yields a single threshold.
pub fn threshold_grid(scores: &[Volume], brains: &[BinaryMask], cfg: &PostProcConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if scores.is_empty() || scores.len() != brains.len() {
        bail!(InvalidArgument, "{} score maps with {} brain masks", scores.len(), brains.len());
    }
    let mut pooled = Vec::new();
    for (s, b) in scores.iter().zip(brains) {
        s.ensure_same_dims(b.dims())?;
        pooled.extend(s.data().iter().zip(b.data()).filter(|(_, &m)| m).map(|(&v, _)| v));
    }
    if pooled.is_empty() {
        bail!(InvalidArgument, "brain masks are empty");
    }
    let lo = percentile_value(&pooled, cfg.grid_low)?;
    let hi = percentile_value(&pooled, cfg.grid_high)?;
    let n = cfg.grid_size;
    let mut grid: Vec<f64> = (0..n)
        .map(|i| if n == 1 { lo } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 })
        .collect();
    grid.dedup();
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdSearchResult {
    pub threshold: f64,
    pub dice: f64,
    pub grid: Vec<f64>,
    /// Mean Dice at every grid value, in grid order.
    pub dice_per_threshold: Vec<f64>,
}

/// Mean Dice of `segment(score, θ)` against the ground truth for every θ in
/// the grid; returns the best, preferring the smaller threshold on ties.
/// `scores` are outputs of [`score_map`].
pub fn greedy_threshold_search(
    scores: &[Volume],
    gts: &[BinaryMask],
    grid: &[f64],
    cfg: &PostProcConfig,
) -> Result<ThresholdSearchResult> {
    if grid.is_empty() {
        bail!(InvalidArgument, "threshold grid is empty");
    }
    if scores.is_empty() || scores.len() != gts.len() {
        bail!(InvalidArgument, "{} score maps with {} ground truths", scores.len(), gts.len());
    }
    let mut per = Vec::with_capacity(grid.len());
    for &theta in grid {
        let mut sum = 0.0;
        for (s, g) in scores.iter().zip(gts) {
            sum += dice(&segment(s, theta, cfg)?, g)?;
        }
        per.push(sum / scores.len() as f64);
    }
    let mut best = 0;
    for i in 1..grid.len() {
        if per[i] > per[best] || (per[i] == per[best] && grid[i] < grid[best]) {
            best = i;
        }
    }
    Ok(ThresholdSearchResult {
        threshold: grid[best],
        dice: per[best],
        grid: grid.to_vec(),
        dice_per_threshold: per,
    })
}
