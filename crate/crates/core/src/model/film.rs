//! Time embedding, condition vectors and feature-wise modulation.

use candle_core::{DType, Device, Tensor};

use crate::error::{bail, Result};

/// Dense embedding of a noise-free input slice.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextVector {
    pub values: Vec<f64>,
}

impl ContextVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            bail!(InvalidArgument, "context vector must be finite");
        }
        Ok(Self { values })
    }

    pub fn zeros(d: usize) -> Self {
        Self { values: vec![0.0; d] }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.values.clone(), (1, self.dim()), &Device::Cpu)?.to_dtype(dtype)?)
    }
}

/// Interleaved sin/cos over geometric frequencies `10000^(-k/half)`.
pub fn sinusoidal_embed(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let freq = (-(10000f64).ln() * k as f64 / half as f64).exp();
        out.push((t * freq).sin());
        out.push((t * freq).cos());
    }
    if dim % 2 == 1 {
        out.push(0.0);
    }
    out
}

/// Batched [`sinusoidal_embed`] as a `(B, dim)` tensor.
pub fn sinusoidal_tensor(ts: &[usize], dim: usize, dtype: DType) -> Result<Tensor> {
    let data: Vec<f64> = ts.iter().flat_map(|&t| sinusoidal_embed(t as f64, dim)).collect();
    Ok(Tensor::from_vec(data, (ts.len(), dim), &Device::Cpu)?.to_dtype(dtype)?)
}

/// `[c ; c_t]`.
pub fn build_condition(c: &[f64], c_t: &[f64]) -> Result<Vec<f64>> {
    if c.len() != c_t.len() {
        bail!(DimensionMismatch, "context length {} vs time length {}", c.len(), c_t.len());
    }
    Ok(c.iter().chain(c_t).copied().collect())
}

/// Per-channel scale and shift for one U-Net level.
#[derive(Debug, Clone, PartialEq)]
pub struct FilmParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl FilmParams {
    /// Split a projected vector of length `2C` into `(γ, β)`.
    pub fn from_projection(proj: &[f64]) -> Result<Self> {
        if proj.len() % 2 != 0 {
            bail!(DimensionMismatch, "projection length {} is odd", proj.len());
        }
        let c = proj.len() / 2;
        Ok(Self {
            gamma: proj[..c].to_vec(),
            beta: proj[c..].to_vec(),
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// `f * (γ + 1) + β` on a `(C, H, W)` map stored channel-major.
pub fn film_transform(features: &[f64], channels: usize, p: &FilmParams) -> Result<Vec<f64>> {
    if p.gamma.len() != channels || p.beta.len() != channels {
        bail!(
            DimensionMismatch,
            "FiLM has {} channels, feature map has {channels}",
            p.gamma.len()
        );
    }
    if channels == 0 || features.len() % channels != 0 {
        bail!(DimensionMismatch, "feature map length {} not divisible by {channels}", features.len());
    }
    let plane = features.len() / channels;
    Ok(features
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let c = i / plane;
            f * (p.gamma[c] + 1.0) + p.beta[c]
        })
        .collect())
}

/// Tensor form of [`film_transform`]: `features` is `(B, C, H, W)` and
/// `projection` is `(B, 2C)`.
pub fn film_apply(features: &Tensor, projection: &Tensor) -> Result<Tensor> {
    let (b, c, _, _) = features.dims4()?;
    let (pb, two_c) = projection.dims2()?;
    if pb != b || two_c != 2 * c {
        bail!(
            DimensionMismatch,
            "projection {:?} for features {:?}",
            projection.dims(),
            features.dims()
        );
    }
    let gamma = projection.narrow(1, 0, c)?.reshape((b, c, 1, 1))?;
    let beta = projection.narrow(1, c, c)?.reshape((b, c, 1, 1))?;
    Ok(features.broadcast_mul(&(gamma + 1.0)?)?.broadcast_add(&beta)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_bounds_and_origin() {
        for t in [0.0, 1.0, 500.0, 1000.0] {
            assert!(sinusoidal_embed(t, 32).iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        let e0 = sinusoidal_embed(0.0, 8);
        for k in 0..4 {
            assert_eq!(e0[2 * k], 0.0);
            assert_eq!(e0[2 * k + 1], 1.0);
        }
    }

    #[test]
    fn neighbouring_steps_differ() {
        let a = sinusoidal_embed(100.0, 32);
        let b = sinusoidal_embed(101.0, 32);
        let diff: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!(diff > 0.0);
    }

    #[test]
    fn embedding_is_injective_over_steps() {
        let embs: Vec<Vec<f64>> = (1..=1000).map(|t| sinusoidal_embed(t as f64, 32)).collect();
        for i in 0..embs.len() {
            for j in i + 1..embs.len() {
                let d: f64 = embs[i].iter().zip(&embs[j]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(d > 1e-9, "t={} and t={} collide", i + 1, j + 1);
            }
        }
    }

    #[test]
    fn condition_concatenates() {
        assert_eq!(build_condition(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
        let c = build_condition(&[0.0; 3], &[5.0; 3]).unwrap();
        assert_eq!(c.len(), 6);
        assert!(c[..3].iter().all(|&v| v == 0.0));
        assert!(build_condition(&[0.0; 3], &[5.0; 2]).is_err());
    }

    #[test]
    fn film_identity_and_doubling() {
        let f: Vec<f64> = (0..18).map(|i| i as f64 * 0.5 - 3.0).collect();
        let zero = FilmParams {
            gamma: vec![0.0; 2],
            beta: vec![0.0; 2],
        };
        assert_eq!(film_transform(&f, 2, &zero).unwrap(), f);
        let double = FilmParams {
            gamma: vec![1.0; 2],
            beta: vec![0.0; 2],
        };
        let out = film_transform(&f, 2, &double).unwrap();
        assert!(out.iter().zip(&f).all(|(o, x)| *o == 2.0 * x));
        assert!(film_transform(&f, 3, &zero).is_err());
    }

    #[test]
    fn film_matches_scalar_loop() {
        let mut rng = crate::seed::rng(4, &[]);
        use rand::Rng;
        let f: Vec<f64> = (0..18).map(|_| rng.random_range(-1.0..1.0)).collect();
        let proj: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p = FilmParams::from_projection(&proj).unwrap();
        let out = film_transform(&f, 2, &p).unwrap();
        for c in 0..2 {
            for y in 0..3 {
                for x in 0..3 {
                    let i = c * 9 + y * 3 + x;
                    let expected = f[i] * (proj[c] + 1.0) + proj[2 + c];
                    assert!((out[i] - expected).abs() < 1e-15);
                }
            }
        }
        let ft = Tensor::from_vec(f.clone(), (1, 2, 3, 3), &Device::Cpu).unwrap();
        let pt = Tensor::from_vec(proj, (1, 4), &Device::Cpu).unwrap();
        let tv: Vec<f64> = film_apply(&ft, &pt).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        for (a, b) in tv.iter().zip(&out) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
