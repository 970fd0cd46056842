//! Noise fields: i.i.d. Gaussian and multi-octave simplex noise.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{bail, Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NoiseKind {
    Gaussian,
    Simplex,
}

impl NoiseKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Gaussian => "gaussian",
            Self::Simplex => "simplex",
        }
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "simplex" => Ok(Self::Simplex),
            other => Err(Error::Unknown {
                kind: "noise kind",
                name: other.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimplexParams {
    pub octaves: usize,
    pub persistence: f64,
    /// Frequency of the first octave in cycles per pixel; each octave doubles it.
    pub frequency: f64,
}

impl Default for SimplexParams {
    fn default() -> Self {
        Self {
            octaves: 6,
            persistence: 0.8,
            frequency: 1.0 / 32.0,
        }
    }
}

/// A 2D noise field of `h * w` values.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseField {
    pub h: usize,
    pub w: usize,
    pub values: Vec<f64>,
    pub kind: NoiseKind,
    pub seed: u64,
}

pub fn sample_noise(
    (h, w): (usize, usize),
    kind: NoiseKind,
    seed: u64,
    params: &SimplexParams,
) -> Result<NoiseField> {
    if h == 0 || w == 0 {
        bail!(InvalidArgument, "noise field dims must be positive");
    }
    let values = match kind {
        NoiseKind::Gaussian => {
            let mut rng = seed::rng(seed, &[seed::label("gaussian")]);
            (0..h * w).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
        }
        NoiseKind::Simplex => simplex_field(h, w, seed, params)?,
    };
    Ok(NoiseField {
        h,
        w,
        values,
        kind,
        seed,
    })
}

/// Parse the kind by name, then sample.
pub fn sample_noise_named(
    dims: (usize, usize),
    kind: &str,
    seed: u64,
    params: &SimplexParams,
) -> Result<NoiseField> {
    sample_noise(dims, kind.parse()?, seed, params)
}

fn simplex_field(h: usize, w: usize, seed: u64, params: &SimplexParams) -> Result<Vec<f64>> {
    if params.octaves == 0 || !(params.frequency > 0.0) || !(params.persistence > 0.0) {
        bail!(InvalidArgument, "invalid simplex parameters {params:?}");
    }
    let mut rng = seed::rng(seed, &[seed::label("simplex")]);
    let simplex = Simplex2::new(&mut rng);
    let offsets: Vec<(f64, f64)> = (0..params.octaves)
        .map(|_| (rng.random_range(0.0..256.0), rng.random_range(0.0..256.0)))
        .collect();
    let mut values = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut freq = params.frequency;
            let mut amp = 1.0;
            let mut acc = 0.0;
            for &(ox, oy) in &offsets {
                acc += amp * simplex.at(x as f64 * freq + ox, y as f64 * freq + oy);
                freq *= 2.0;
                amp *= params.persistence;
            }
            values[y * w + x] = acc;
        }
    }
    standardize(&mut values);
    Ok(values)
}

/// Shift to zero mean and scale to unit (population) variance.
pub fn standardize(values: &mut [f64]) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 0.0 };
    for v in values.iter_mut() {
        *v = (*v - mean) * inv;
    }
}

/// Classic 2D simplex noise over a seeded permutation table.
struct Simplex2 {
    perm: [u8; 512],
}

const GRAD2: [(f64, f64); 8] = [
    (1.0, 1.0),
    (-1.0, 1.0),
    (1.0, -1.0),
    (-1.0, -1.0),
    (1.0, 0.0),
    (-1.0, 0.0),
    (0.0, 1.0),
    (0.0, -1.0),
];

impl Simplex2 {
    fn new(rng: &mut impl Rng) -> Self {
        let mut p: Vec<u8> = (0..=255).collect();
        p.shuffle(rng);
        let mut perm = [0u8; 512];
        for i in 0..512 {
            perm[i] = p[i & 255];
        }
        Self { perm }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let f2 = 0.5 * (3f64.sqrt() - 1.0);
        let g2 = (3.0 - 3f64.sqrt()) / 6.0;
        let s = (x + y) * f2;
        let i = (x + s).floor();
        let j = (y + s).floor();
        let t = (i + j) * g2;
        let x0 = x - (i - t);
        let y0 = y - (j - t);
        let (i1, j1) = if x0 > y0 { (1, 0) } else { (0, 1) };
        let x1 = x0 - i1 as f64 + g2;
        let y1 = y0 - j1 as f64 + g2;
        let x2 = x0 - 1.0 + 2.0 * g2;
        let y2 = y0 - 1.0 + 2.0 * g2;
        let ii = (i as i64 & 255) as usize;
        let jj = (j as i64 & 255) as usize;
        let corner = |gi: usize, dx: f64, dy: f64| {
            let t = 0.5 - dx * dx - dy * dy;
            if t < 0.0 {
                0.0
            } else {
                let (gx, gy) = GRAD2[gi % 8];
                t.powi(4) * (gx * dx + gy * dy)
            }
        };
        let p = &self.perm;
        let g0 = p[ii + p[jj] as usize] as usize;
        let g1 = p[ii + i1 + p[jj + j1] as usize] as usize;
        let g2i = p[ii + 1 + p[jj + 1] as usize] as usize;
        70.0 * (corner(g0, x0, y0) + corner(g1, x1, y1) + corner(g2i, x2, y2))
    }
}
