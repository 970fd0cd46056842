//! Variance schedules for the forward diffusion process.

use crate::error::{bail, Result};

/// Precomputed β, ᾱ and posterior variance tables for steps `1..=T`.
///
/// Internally index `t - 1` holds the value for step `t`; ᾱ at step 0 is 1.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_variances: Vec<f64>,
}

impl NoiseSchedule {
    /// Build a schedule from an explicit β sequence.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            bail!(InvalidArgument, "schedule needs at least one step");
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            bail!(InvalidArgument, "beta {b} outside (0, 1)");
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        // Σ(t) = (1 - ᾱ_{t-1}) / (1 - ᾱ_t) · β_t; undefined at t = 1.
        let mut posterior_variances = vec![0.0; betas.len()];
        for t in 2..=betas.len() {
            posterior_variances[t - 1] =
                (1.0 - alpha_bars[t - 2]) / (1.0 - alpha_bars[t - 1]) * betas[t - 1];
        }
        Ok(Self {
            betas,
            alpha_bars,
            posterior_variances,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_step(t, 1)?;
        Ok(self.betas[t - 1])
    }

    /// ᾱ_t for `0 <= t <= T`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check_step(t, 1)?;
        Ok(self.alpha_bars[t - 1])
    }

    /// Σ(t) for `2 <= t <= T`.
    pub fn posterior_variance(&self, t: usize) -> Result<f64> {
        self.check_step(t, 2)?;
        Ok(self.posterior_variances[t - 1])
    }

    /// `(sqrt(ᾱ_t), sqrt(1 - ᾱ_t))`, the signal and noise mixing weights.
    pub fn mixing(&self, t: usize) -> Result<(f64, f64)> {
        let ab = self.alpha_bar(t)?;
        Ok((ab.sqrt(), (1.0 - ab).sqrt()))
    }

    fn check_step(&self, t: usize, min: usize) -> Result<()> {
        if t < min || t > self.steps() {
            bail!(OutOfRange, "step {t} outside [{min}, {}]", self.steps());
        }
        Ok(())
    }
}

/// Linearly interpolated β from `beta_start` to `beta_end` over `steps` steps.
pub fn linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        bail!(InvalidArgument, "T must be at least 1");
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        bail!(
            InvalidArgument,
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        );
    }
    let betas = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    NoiseSchedule::from_betas(betas)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn product_oracle(betas: &[f64], t: usize) -> f64 {
        betas[..t].iter().map(|b| 1.0 - b).product()
    }

    #[test]
    fn full_length_is_accepted() {
        let s = linear_schedule(1000, 1e-4, 2e-2).unwrap();
        assert_eq!(s.steps(), 1000);
    }

    #[test]
    fn single_step() {
        let s = linear_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar(1).unwrap(), 0.5);
    }

    #[test]
    fn constant_beta_power() {
        let s = linear_schedule(10, 0.1, 0.1).unwrap();
        let expected = 0.9f64.powi(10);
        assert!((s.alpha_bar(10).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.3487).abs() < 1e-4);
    }

    #[test]
    fn alpha_bar_edges() {
        let s = linear_schedule(100, 1e-3, 5e-2).unwrap();
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
        let min = (1..=100).map(|t| s.alpha_bar(t).unwrap()).fold(f64::INFINITY, f64::min);
        assert_eq!(s.alpha_bar(100).unwrap(), min);
        assert!(s.alpha_bar(101).is_err());
    }

    #[test]
    fn posterior_variance_hand_computation() {
        let b = 0.05;
        let s = linear_schedule(5, b, b).unwrap();
        let a1 = 1.0 - b;
        let a2 = a1 * (1.0 - b);
        let expected = (1.0 - a1) / (1.0 - a2) * b;
        assert!((s.posterior_variance(2).unwrap() - expected).abs() < 1e-15);
        assert!(s.posterior_variance(1).is_err());
        assert!(s.posterior_variance(0).is_err());
    }

    #[test]
    fn posterior_variance_vanishes_with_beta() {
        let s = linear_schedule(3, 1e-12, 1e-12).unwrap();
        assert!(s.posterior_variance(3).unwrap() < 1e-11);
    }

    #[test]
    fn invalid_bounds() {
        assert!(linear_schedule(0, 0.1, 0.2).is_err());
        assert!(linear_schedule(10, 0.0, 0.2).is_err());
        assert!(linear_schedule(10, 0.3, 0.2).is_err());
        assert!(linear_schedule(10, 0.1, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn schedule_invariants(betas in prop::collection::vec(1e-5f64..0.5, 2..200)) {
            let s = NoiseSchedule::from_betas(betas.clone()).unwrap();
            let mut prev = 1.0;
            for t in 1..=betas.len() {
                let ab = s.alpha_bar(t).unwrap();
                prop_assert!(ab > 0.0 && ab < prev);
                prop_assert!((ab - product_oracle(&betas, t)).abs() <= 1e-12);
                let (sa, sn) = s.mixing(t).unwrap();
                prop_assert!((sa * sa + sn * sn - 1.0).abs() <= 1e-12);
                if t >= 2 {
                    let pv = s.posterior_variance(t).unwrap();
                    prop_assert!(pv >= 0.0 && pv <= betas[t - 1]);
                    if s.alpha_bar(t - 1).unwrap() > 1e-9 {
                        prop_assert!(pv < betas[t - 1]);
                    }
                }
                prev = ab;
            }
        }
    }
}
