//! Volumes, binary masks and slices, plus the CDV1 container and PGM export.
//!
//! Voxels are stored row-major with W fastest: `index = (z * H + y) * W + x`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{bail, Error, Result};

const MAGIC: &[u8; 4] = b"CDV1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn new(d: usize, h: usize, w: usize) -> Result<Self> {
        if d == 0 || h == 0 || w == 0 {
            bail!(InvalidArgument, "dimensions must be positive, got {d}x{h}x{w}");
        }
        Ok(Self { d, h, w })
    }

    pub fn len(&self) -> usize {
        self.d * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slice_len(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.h + y) * self.w + x
    }

    #[inline]
    pub fn coords(&self, i: usize) -> (usize, usize, usize) {
        let x = i % self.w;
        let y = (i / self.w) % self.h;
        (i / (self.w * self.h), y, x)
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.d, self.h, self.w)
    }
}

/// A 3D scalar grid. All voxels are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(dims: Dims, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.len() {
            bail!(
                DimensionMismatch,
                "{} voxels for dims {dims}",
                data.len()
            );
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            bail!(InvalidArgument, "non-finite voxel {v}");
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.len()],
        }
    }

    pub fn filled(dims: Dims, value: f64) -> Self {
        Self {
            dims,
            data: vec![value; dims.len()],
        }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.len());
        for z in 0..dims.d {
            for y in 0..dims.h {
                for x in 0..dims.w {
                    data.push(f(z, y, x));
                }
            }
        }
        Self::new(dims, data)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f64 {
        self.data[self.dims.index(z, y, x)]
    }

    /// Elementwise map; the result must stay finite.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.dims, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn clamp01(&self) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn ensure_same_dims(&self, other: Dims) -> Result<()> {
        if self.dims != other {
            bail!(DimensionMismatch, "{} vs {}", self.dims, other);
        }
        Ok(())
    }

    pub fn slice(&self, index: usize) -> Result<Slice> {
        if index >= self.dims.d {
            bail!(OutOfRange, "slice {index} of depth {}", self.dims.d);
        }
        let n = self.dims.slice_len();
        Ok(Slice {
            index,
            h: self.dims.h,
            w: self.dims.w,
            pixels: self.data[index * n..(index + 1) * n].to_vec(),
        })
    }
}

/// Percentile using the "higher" rank rule: the value at sorted position
/// `ceil(p * (n - 1))`. With this rule percentile normalization is idempotent.
pub fn percentile_value(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyVolume);
    }
    if !(0.0..=1.0).contains(&p) {
        bail!(InvalidArgument, "percentile {p} outside [0, 1]");
    }
    let rank = (p * (values.len() - 1) as f64).ceil() as usize;
    let mut buf = values.to_vec();
    let (_, v, _) = buf.select_nth_unstable_by(rank, |a, b| a.total_cmp(b));
    Ok(*v)
}

/// Divide by the given percentile and clamp to [0, 1].
pub fn normalize_volume(v: &Volume, percentile: f64) -> Result<Volume> {
    if v.data.iter().all(|&x| x == 0.0) {
        return Err(Error::EmptyVolume);
    }
    let mut scale = percentile_value(&v.data, percentile)?;
    if scale <= 0.0 {
        // Mostly-zero volumes: fall back to the largest voxel.
        scale = v.min_max().1;
        if scale <= 0.0 {
            return Err(Error::EmptyVolume);
        }
    }
    v.map(|x| (x / scale).clamp(0.0, 1.0))
}

/// A binary mask paired with a volume of the same dims.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    dims: Dims,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(dims: Dims, data: Vec<bool>) -> Result<Self> {
        if data.len() != dims.len() {
            bail!(
                DimensionMismatch,
                "{} mask voxels for dims {dims}",
                data.len()
            );
        }
        Ok(Self { dims, data })
    }

    pub fn empty(dims: Dims) -> Self {
        Self {
            dims,
            data: vec![false; dims.len()],
        }
    }

    pub fn full(dims: Dims) -> Self {
        Self {
            dims,
            data: vec![true; dims.len()],
        }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for z in 0..dims.d {
            for y in 0..dims.h {
                for x in 0..dims.w {
                    data.push(f(z, y, x));
                }
            }
        }
        Self { dims, data }
    }

    /// Interpret a volume as a mask; values must be exactly 0 or 1.
    pub fn from_volume(v: &Volume) -> Result<Self> {
        let data = v
            .data
            .iter()
            .map(|&x| {
                if x == 0.0 {
                    Ok(false)
                } else if x == 1.0 {
                    Ok(true)
                } else {
                    Err(Error::NonBinary(x))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(v.dims, data)
    }

    pub fn to_volume(&self) -> Volume {
        Volume {
            dims: self.dims,
            data: self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [bool] {
        &mut self.data
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> bool {
        self.data[self.dims.index(z, y, x)]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.dims == other.dims && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        if self.dims != other.dims {
            bail!(DimensionMismatch, "{} vs {}", self.dims, other.dims);
        }
        Ok(Self {
            dims: self.dims,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a && b).collect(),
        })
    }

    pub fn not(&self) -> BinaryMask {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|&a| !a).collect(),
        }
    }
}

/// One axial slice (along D) of a volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice {
    pub index: usize,
    pub h: usize,
    pub w: usize,
    pub pixels: Vec<f64>,
}

impl Slice {
    pub fn new(index: usize, h: usize, w: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != h * w {
            bail!(DimensionMismatch, "{} pixels for {h}x{w}", pixels.len());
        }
        Ok(Self { index, h, w, pixels })
    }
}

pub fn extract_slices(v: &Volume) -> Vec<Slice> {
    (0..v.dims.d).map(|z| v.slice(z).expect("in range")).collect()
}

/// Reassemble slices keyed by their index; input order is irrelevant.
pub fn assemble_volume(slices: &[Slice]) -> Result<Volume> {
    let first = slices
        .first()
        .ok_or_else(|| Error::InvalidArgument("no slices".into()))?;
    let (h, w) = (first.h, first.w);
    let d = slices.len();
    let mut placed: Vec<Option<&Slice>> = vec![None; d];
    for s in slices {
        if s.h != h || s.w != w || s.pixels.len() != h * w {
            bail!(DimensionMismatch, "slice {} is {}x{}, expected {h}x{w}", s.index, s.h, s.w);
        }
        if s.index >= d {
            bail!(OutOfRange, "slice index {} with only {d} slices", s.index);
        }
        if placed[s.index].replace(s).is_some() {
            bail!(InvalidArgument, "duplicate slice index {}", s.index);
        }
    }
    let mut data = Vec::with_capacity(d * h * w);
    for (i, s) in placed.iter().enumerate() {
        let s = s.ok_or_else(|| Error::InvalidArgument(format!("missing slice index {i}")))?;
        data.extend_from_slice(&s.pixels);
    }
    Volume::new(Dims::new(d, h, w)?, data)
}

pub fn encode_cdv(v: &Volume) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * v.data.len());
    out.extend_from_slice(MAGIC);
    for n in [v.dims.d, v.dims.h, v.dims.w] {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    for &x in &v.data {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    out
}

pub fn decode_cdv(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        bail!(Format, "missing CDV1 header");
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let dims = Dims::new(dim(0), dim(1), dim(2))?;
    let body = &bytes[16..];
    if body.len() != 4 * dims.len() {
        bail!(Format, "expected {} payload bytes, found {}", 4 * dims.len(), body.len());
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Volume::new(dims, data)
}

pub fn write_volume(path: impl AsRef<Path>, v: &Volume) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_cdv(v))?;
    Ok(())
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_cdv(&bytes)
}

pub fn write_mask(path: impl AsRef<Path>, m: &BinaryMask) -> Result<()> {
    write_volume(path, &m.to_volume())
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    BinaryMask::from_volume(&read_volume(path)?)
}

/// 8-bit binary PGM (P5); values are clamped to [0, 1] and scaled to 0..=255.
pub fn encode_pgm(s: &Slice) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", s.w, s.h).into_bytes();
    out.extend(
        s.pixels
            .iter()
            .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

pub fn write_pgm(path: impl AsRef<Path>, s: &Slice) -> Result<()> {
    fs::write(path, encode_pgm(s))?;
    Ok(())
}
