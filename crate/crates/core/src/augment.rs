//! Intensity augmentations and contrast simulation.

use std::str::FromStr;

use rand::Rng;

use crate::error::{bail, Error, Result};
use crate::seed;
use crate::volume::{Dims, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AugmentKind {
    Blur,
    Bias,
    Gamma,
    Ghosting,
}

impl AugmentKind {
    pub const ALL: [AugmentKind; 4] = [Self::Blur, Self::Bias, Self::Gamma, Self::Ghosting];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Blur => "blur",
            Self::Bias => "bias",
            Self::Gamma => "gamma",
            Self::Ghosting => "ghosting",
        }
    }
}

impl FromStr for AugmentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blur" => Ok(Self::Blur),
            "bias" => Ok(Self::Bias),
            "gamma" => Ok(Self::Gamma),
            "ghosting" => Ok(Self::Ghosting),
            other => Err(Error::Unknown {
                kind: "augmentation",
                name: other.to_string(),
            }),
        }
    }
}

/// A fully parameterized corruption.
#[derive(Debug, Clone, PartialEq)]
pub enum Augmentation {
    Blur { sigma: f64 },
    /// Quadratic polynomial field in normalized coordinates; the ten
    /// coefficients multiply `1, z, y, x, z², y², x², zy, zx, yx`.
    Bias { coefficients: [f64; 10], magnitude: f64 },
    Gamma { exponent: f64 },
    Ghosting { axis: usize, shift: usize, attenuation: f64 },
}

impl Augmentation {
    /// Draw the parameters of `kind` from its configured range.
    pub fn sample(kind: AugmentKind, dims: Dims, rng: &mut impl Rng) -> Self {
        match kind {
            AugmentKind::Blur => Self::Blur {
                sigma: rng.random_range(0.5..=1.5),
            },
            AugmentKind::Bias => {
                let mut coefficients = [0.0; 10];
                for c in coefficients.iter_mut().skip(1) {
                    *c = rng.random_range(-1.0..=1.0);
                }
                Self::Bias {
                    coefficients,
                    magnitude: rng.random_range(0.0..=0.2),
                }
            }
            AugmentKind::Gamma => Self::Gamma {
                exponent: rng.random_range(0.7..=1.5),
            },
            AugmentKind::Ghosting => {
                let axis = rng.random_range(1..=2);
                let len = if axis == 1 { dims.h } else { dims.w };
                Self::Ghosting {
                    axis,
                    shift: rng.random_range((len / 4).max(1)..=(len / 2).max(1)),
                    attenuation: 0.2,
                }
            }
        }
    }

    /// Apply the corruption; the result is clamped to [0, 1].
    pub fn apply(&self, v: &Volume) -> Result<Volume> {
        let out = match self {
            Self::Blur { sigma } => gaussian_blur(v, *sigma)?,
            Self::Bias {
                coefficients,
                magnitude,
            } => bias_field(v, coefficients, *magnitude)?,
            Self::Gamma { exponent } => {
                if *exponent <= 0.0 {
                    bail!(InvalidArgument, "gamma exponent must be positive");
                }
                v.map(|x| x.max(0.0).powf(*exponent))?
            }
            Self::Ghosting {
                axis,
                shift,
                attenuation,
            } => ghost(v, *axis, *shift, *attenuation)?,
        };
        Ok(out.clamp01())
    }
}

/// With probability `probability` apply a randomly parameterized `kind`.
pub fn augment(v: &Volume, kind: AugmentKind, probability: f64, seed: u64) -> Result<Volume> {
    if !(0.0..=1.0).contains(&probability) {
        bail!(InvalidArgument, "probability {probability} outside [0, 1]");
    }
    let mut rng = seed::rng(seed, &[seed::label(kind.name())]);
    if rng.random::<f64>() >= probability {
        return Ok(v.clone());
    }
    Augmentation::sample(kind, v.dims(), &mut rng).apply(v)
}

/// Like [`augment`] but with the kind given by name.
pub fn augment_named(v: &Volume, kind: &str, probability: f64, seed: u64) -> Result<Volume> {
    augment(v, kind.parse()?, probability, seed)
}

/// Apply every augmentation in turn with its own probability.
pub fn augment_all(v: &Volume, probabilities: &[(AugmentKind, f64)], seed: u64) -> Result<Volume> {
    probabilities
        .iter()
        .try_fold(v.clone(), |acc, &(kind, p)| augment(&acc, kind, p, seed))
}

/// Raise every voxel to the power `cl`.
pub fn contrast_transform(v: &Volume, cl: f64) -> Result<Volume> {
    if !(cl > 0.0) || !cl.is_finite() {
        bail!(InvalidArgument, "contrast level must be positive, got {cl}");
    }
    v.map(|x| x.max(0.0).powf(cl))
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.into_iter().map(|x| x / sum).collect()
}

/// Separable Gaussian smoothing with edge replication.
pub fn gaussian_blur(v: &Volume, sigma: f64) -> Result<Volume> {
    if !(sigma > 0.0) {
        bail!(InvalidArgument, "sigma must be positive");
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let dims = v.dims();
    let mut cur = v.data().to_vec();
    let lens = [dims.d, dims.h, dims.w];
    let strides = [dims.h * dims.w, dims.w, 1];
    for axis in 0..3 {
        let len = lens[axis] as i64;
        let stride = strides[axis];
        let mut next = vec![0.0; cur.len()];
        for (i, out) in next.iter_mut().enumerate() {
            let pos = ((i / stride) % lens[axis]) as i64;
            let base = i - pos as usize * stride;
            *out = k
                .iter()
                .enumerate()
                .map(|(j, w)| {
                    let p = (pos + j as i64 - r).clamp(0, len - 1) as usize;
                    w * cur[base + p * stride]
                })
                .sum();
        }
        cur = next;
    }
    Volume::new(dims, cur)
}

fn bias_field(v: &Volume, coefficients: &[f64; 10], magnitude: f64) -> Result<Volume> {
    let dims = v.dims();
    let norm = |i: usize, n: usize| {
        if n > 1 {
            2.0 * i as f64 / (n - 1) as f64 - 1.0
        } else {
            0.0
        }
    };
    let poly = |z: usize, y: usize, x: usize| {
        let (z, y, x) = (norm(z, dims.d), norm(y, dims.h), norm(x, dims.w));
        let terms = [1.0, z, y, x, z * z, y * y, x * x, z * y, z * x, y * x];
        terms.iter().zip(coefficients).map(|(t, c)| t * c).sum::<f64>()
    };
    let raw = Volume::from_fn(dims, poly)?;
    let peak = raw.data().iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let scale = if peak > 0.0 { magnitude / peak } else { 0.0 };
    let data = v
        .data()
        .iter()
        .zip(raw.data())
        .map(|(x, p)| x * (1.0 + scale * p))
        .collect();
    Volume::new(dims, data)
}

fn ghost(v: &Volume, axis: usize, shift: usize, attenuation: f64) -> Result<Volume> {
    let dims = v.dims();
    if axis > 2 {
        bail!(InvalidArgument, "axis {axis} out of range");
    }
    Volume::from_fn(dims, |z, y, x| {
        let mut src = [z, y, x];
        let len = [dims.d, dims.h, dims.w][axis];
        src[axis] = (src[axis] + len - shift % len) % len;
        v.get(z, y, x) + attenuation * v.get(src[0], src[1], src[2])
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn white_noise(dims: Dims, seed: u64) -> Volume {
        let mut rng = seed::rng(seed, &[]);
        Volume::new(dims, (0..dims.len()).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    fn variance(xs: &[f64]) -> f64 {
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64
    }

    #[test]
    fn zero_probability_is_identity() {
        let v = white_noise(Dims::new(4, 8, 8).unwrap(), 1);
        for kind in AugmentKind::ALL {
            assert_eq!(augment(&v, kind, 0.0, 3).unwrap(), v);
        }
    }

    #[test]
    fn unit_gamma_is_identity() {
        let v = white_noise(Dims::new(4, 8, 8).unwrap(), 1);
        assert_eq!(Augmentation::Gamma { exponent: 1.0 }.apply(&v).unwrap(), v);
    }

    #[test]
    fn blur_reduces_white_noise_variance() {
        let v = white_noise(Dims::new(8, 16, 16).unwrap(), 4);
        let b = Augmentation::Blur { sigma: 1.0 }.apply(&v).unwrap();
        assert!(variance(b.data()) < 0.5 * variance(v.data()));
    }

    #[test]
    fn unknown_kind_is_an_error() {
        let v = white_noise(Dims::new(1, 2, 2).unwrap(), 1);
        assert!(matches!(augment_named(&v, "elastic", 1.0, 0), Err(Error::Unknown { .. })));
        assert!(augment_named(&v, "blur", 1.0, 0).is_ok());
    }

    #[test]
    fn outputs_stay_in_unit_range() {
        let v = white_noise(Dims::new(4, 8, 8).unwrap(), 2);
        for kind in AugmentKind::ALL {
            for s in 0..5 {
                let out = augment(&v, kind, 1.0, s).unwrap();
                let (lo, hi) = out.min_max();
                assert!(lo >= 0.0 && hi <= 1.0);
            }
        }
    }

    #[test]
    fn bias_field_stays_within_twenty_percent() {
        let dims = Dims::new(4, 8, 8).unwrap();
        let v = Volume::filled(dims, 0.5);
        let mut rng = seed::rng(3, &[]);
        let aug = Augmentation::sample(AugmentKind::Bias, dims, &mut rng);
        let out = aug.apply(&v).unwrap();
        for x in out.data() {
            assert!((x / 0.5 - 1.0).abs() <= 0.2 + 1e-12);
        }
    }

    #[test]
    fn ghosting_adds_attenuated_shifted_copy() {
        let dims = Dims::new(1, 1, 4).unwrap();
        let v = Volume::new(dims, vec![0.0, 0.5, 0.0, 0.0]).unwrap();
        let g = Augmentation::Ghosting {
            axis: 2,
            shift: 2,
            attenuation: 0.2,
        }
        .apply(&v)
        .unwrap();
        assert_eq!(g.data(), &[0.0, 0.5, 0.0, 0.1]);
    }

    #[test]
    fn contrast_levels() {
        let dims = Dims::new(1, 1, 2).unwrap();
        let v = Volume::new(dims, vec![0.5, 0.9]).unwrap();
        assert_eq!(contrast_transform(&v, 1.0).unwrap(), v);
        assert_eq!(contrast_transform(&v, 2.0).unwrap().data()[0], 0.25);
        for cl in [0.3, 0.7, 1.0, 1.5, 2.0] {
            assert!(contrast_transform(&v, cl).is_ok());
        }
        assert!(contrast_transform(&v, 0.0).is_err());
        assert!(contrast_transform(&v, -1.0).is_err());
    }
}
