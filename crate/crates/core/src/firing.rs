//! Per-feature firing probabilities and magnitude parameters.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::rng::{self, domain, StreamRng};

/// Firing probability per feature, each in `(0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FiringProbabilities(Vec<f64>);

impl FiringProbabilities {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if let Some((i, v)) = p.iter().enumerate().find(|(_, &v)| !(v > 0.0 && v <= 1.0)) {
            return Err(config_err(format!("probability {i} is {v}, expected (0, 1]")));
        }
        Ok(Self(p))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn expected_l0(&self) -> f64 {
        self.0.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProbSpec {
    Zipfian { p_min: f64, p_max: f64, exponent: f64 },
    Linear { p_min: f64, p_max: f64 },
    Uniform { p_min: f64, p_max: f64 },
    Constant { p: f64 },
}

impl ProbSpec {
    pub fn build(&self, n: usize, seed: u64) -> Result<FiringProbabilities> {
        match *self {
            ProbSpec::Zipfian { p_min, p_max, exponent } => zipfian_probs(n, p_min, p_max, exponent),
            ProbSpec::Linear { p_min, p_max } => linear_probs(n, p_min, p_max),
            ProbSpec::Uniform { p_min, p_max } => uniform_probs(n, p_min, p_max, seed),
            ProbSpec::Constant { p } => constant_probs(n, p),
        }
    }
}

fn check_bounds(p_min: f64, p_max: f64) -> Result<()> {
    if !(p_min > 0.0 && p_min <= p_max && p_max <= 1.0) {
        return Err(config_err(format!(
            "need 0 < p_min <= p_max <= 1, got p_min={p_min} p_max={p_max}"
        )));
    }
    Ok(())
}

/// `i^{-α}` for `i = 1..=n`, mapped affinely so the first value is `p_max`
/// and the last is `p_min`.
pub fn zipfian_probs(n: usize, p_min: f64, p_max: f64, exponent: f64) -> Result<FiringProbabilities> {
    check_bounds(p_min, p_max)?;
    if !(exponent > 0.0) {
        return Err(config_err(format!("zipf exponent must be > 0, got {exponent}")));
    }
    if n <= 1 {
        return FiringProbabilities::new(vec![p_max; n]);
    }
    let last = (n as f64).powf(-exponent);
    let span = 1.0 - last;
    let p = (1..=n)
        .map(|i| {
            let raw = (i as f64).powf(-exponent);
            (p_min + (raw - last) / span * (p_max - p_min)).clamp(p_min, p_max)
        })
        .collect();
    FiringProbabilities::new(p)
}

/// Linear interpolation from `p_max` (first feature) to `p_min` (last).
pub fn linear_probs(n: usize, p_min: f64, p_max: f64) -> Result<FiringProbabilities> {
    check_bounds(p_min, p_max)?;
    FiringProbabilities::new(lerp_range(n, p_max, p_min))
}

pub fn uniform_probs(n: usize, p_min: f64, p_max: f64, seed: u64) -> Result<FiringProbabilities> {
    check_bounds(p_min, p_max)?;
    let mut rng = rng::stream(seed, &[domain::FIRING_PROBS]);
    let p = (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            // keep p_min > 0 reachable and p_max inclusive
            (p_min + u * (p_max - p_min)).clamp(p_min, p_max)
        })
        .collect();
    FiringProbabilities::new(p)
}

pub fn constant_probs(n: usize, p: f64) -> Result<FiringProbabilities> {
    check_bounds(p, p)?;
    FiringProbabilities::new(vec![p; n])
}

fn lerp_range(n: usize, start: f64, end: f64) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![start],
        _ => (0..n)
            .map(|i| {
                let t = i as f64 / (n - 1) as f64;
                start * (1.0 - t) + end * t
            })
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MagnitudeSpec {
    Constant { value: f64 },
    /// From `start` (first feature) to `end` (last feature).
    Linear { start: f64, end: f64 },
    /// Geometric interpolation; both endpoints must be positive.
    Exponential { start: f64, end: f64 },
    /// `|N(mean, std²)|`, drawn independently per feature.
    FoldedNormal { mean: f64, std: f64 },
}

impl MagnitudeSpec {
    fn values(&self, n: usize, rng: &mut StreamRng) -> Result<Vec<f64>> {
        match *self {
            MagnitudeSpec::Constant { value } => Ok(vec![value; n]),
            MagnitudeSpec::Linear { start, end } => Ok(lerp_range(n, start, end)),
            MagnitudeSpec::Exponential { start, end } => {
                if !(start > 0.0 && end > 0.0) {
                    return Err(config_err(format!(
                        "exponential interpolation needs positive endpoints, got {start} and {end}"
                    )));
                }
                Ok(lerp_range(n, start.ln(), end.ln()).into_iter().map(f64::exp).collect())
            }
            MagnitudeSpec::FoldedNormal { mean, std } => {
                if !(std >= 0.0) {
                    return Err(config_err(format!("folded normal std must be >= 0, got {std}")));
                }
                Ok((0..n)
                    .map(|_| {
                        let e: f64 = rng.sample(StandardNormal);
                        (mean + std * e).abs()
                    })
                    .collect())
            }
        }
    }
}

/// Per-feature magnitude mean and standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct MagnitudeParams {
    pub mu: Vec<f32>,
    pub sigma: Vec<f32>,
}

impl MagnitudeParams {
    pub fn new(mu: Vec<f32>, sigma: Vec<f32>) -> Result<Self> {
        if mu.len() != sigma.len() {
            return Err(config_err("mu and sigma lengths differ"));
        }
        if let Some((i, s)) = sigma.iter().enumerate().find(|(_, &s)| !(s >= 0.0)) {
            return Err(config_err(format!("sigma {i} is {s}, expected >= 0")));
        }
        if mu.iter().any(|m| !m.is_finite()) || sigma.iter().any(|s| !s.is_finite()) {
            return Err(config_err("magnitude parameters must be finite"));
        }
        Ok(Self { mu, sigma })
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    /// Expected value of `ReLU(μᵢ + σᵢε)` for each feature.
    pub fn rectified_means(&self) -> Vec<f64> {
        self.mu
            .iter()
            .zip(&self.sigma)
            .map(|(&m, &s)| crate::normal::rectified_gaussian_mean(m as f64, s as f64))
            .collect()
    }

    /// `ReLU(μᵢ + σᵢε)` for one firing feature.
    #[inline]
    pub fn draw(&self, i: usize, rng: &mut StreamRng) -> f32 {
        let s = self.sigma[i];
        let v = if s > 0.0 {
            let e: f32 = rng.sample(StandardNormal);
            self.mu[i] + s * e
        } else {
            self.mu[i]
        };
        v.max(0.0)
    }
}

pub fn magnitude_params(
    n: usize,
    mean_spec: &MagnitudeSpec,
    sigma_spec: &MagnitudeSpec,
    seed: u64,
) -> Result<MagnitudeParams> {
    let mu = mean_spec.values(n, &mut rng::stream(seed, &[domain::MAGNITUDE_MEAN]))?;
    let sigma = sigma_spec.values(n, &mut rng::stream(seed, &[domain::MAGNITUDE_STD]))?;
    MagnitudeParams::new(
        mu.into_iter().map(|v| v as f32).collect(),
        sigma.into_iter().map(|v| v as f32).collect(),
    )
}

/// `cᵢ = zᵢ · ReLU(μᵢ + σᵢεᵢ)`. Noise is only drawn for firing features.
pub fn sample_magnitudes(z: &[bool], params: &MagnitudeParams, rng: &mut StreamRng) -> Vec<f32> {
    z.iter()
        .enumerate()
        .map(|(i, &fires)| if fires { params.draw(i, rng) } else { 0.0 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::normal::norm_cdf;
    use proptest::prelude::*;

    #[test]
    fn zipf_endpoints_and_middle() {
        let p = zipfian_probs(16384, 5e-4, 0.4, 0.5).unwrap();
        assert_eq!(p.as_slice()[0], 0.4);
        assert!((p.as_slice()[16383] - 5e-4).abs() < 1e-15);
        assert_eq!(zipfian_probs(2, 0.1, 0.4, 3.0).unwrap().as_slice(), &[0.4, 0.1]);
        let p3 = zipfian_probs(3, 0.1, 0.4, 1.0).unwrap();
        assert!((p3.as_slice()[1] - 0.175).abs() < 1e-12);
        assert_eq!(zipfian_probs(1, 0.1, 0.4, 1.0).unwrap().as_slice(), &[0.4]);
    }

    #[test]
    fn zipf_rejects_bad_bounds() {
        assert!(zipfian_probs(4, 0.0, 0.4, 1.0).is_err());
        assert!(zipfian_probs(4, 0.5, 0.4, 1.0).is_err());
        assert!(zipfian_probs(4, 0.1, 0.4, 0.0).is_err());
    }

    #[test]
    fn linear_constant_uniform() {
        let l = linear_probs(3, 0.01, 1.0).unwrap();
        assert_eq!(l.as_slice(), &[1.0, 0.505, 0.01]);
        assert!(linear_probs(3, 0.0, 1.0).is_err());
        assert_eq!(constant_probs(5, 0.2).unwrap().as_slice(), &[0.2; 5]);
        let u = uniform_probs(100_000, 0.1, 0.3, 9).unwrap();
        let mean = u.expected_l0() / 1e5;
        assert!((mean - 0.2).abs() < 0.002);
        assert!(u.as_slice().iter().all(|&p| (0.1..=0.3).contains(&p)));
    }

    #[test]
    fn linear_magnitudes_hit_endpoints() {
        let m = magnitude_params(
            16384,
            &MagnitudeSpec::Linear { start: 5.0, end: 4.0 },
            &MagnitudeSpec::Constant { value: 0.0 },
            0,
        )
        .unwrap();
        assert_eq!(m.mu[0], 5.0);
        assert_eq!(m.mu[16383], 4.0);
    }

    #[test]
    fn exponential_is_geometric() {
        let v = MagnitudeSpec::Exponential { start: 1.0, end: 4.0 }
            .values(3, &mut rng::stream(0, &[]))
            .unwrap();
        assert!((v[1] - 2.0).abs() < 1e-12);
        assert!(MagnitudeSpec::Exponential { start: 0.0, end: 1.0 }
            .values(3, &mut rng::stream(0, &[]))
            .is_err());
    }

    #[test]
    fn folded_normal_sigma_mean() {
        // E|N(μ,σ²)| = σ√(2/π)e^{-μ²/2σ²} + μ(1 − 2Φ(−μ/σ)); at μ=σ=0.5
        let (mu, s) = (0.5f64, 0.5f64);
        let oracle = s * (2.0 / std::f64::consts::PI).sqrt() * (-mu * mu / (2.0 * s * s)).exp()
            + mu * (1.0 - 2.0 * norm_cdf(-mu / s));
        assert!((oracle - 0.5 * 1.1666).abs() < 1e-3);
        let m = magnitude_params(
            1_000_000,
            &MagnitudeSpec::Constant { value: 1.0 },
            &MagnitudeSpec::FoldedNormal { mean: 0.5, std: 0.5 },
            3,
        )
        .unwrap();
        assert!(m.sigma.iter().all(|&s| s >= 0.0));
        let emp = m.sigma.iter().map(|&s| s as f64).sum::<f64>() / 1e6;
        assert!((emp - oracle).abs() < 0.01, "{emp} vs {oracle}");
    }

    #[test]
    fn negative_constant_sigma_is_rejected() {
        let r = magnitude_params(
            3,
            &MagnitudeSpec::Constant { value: 1.0 },
            &MagnitudeSpec::Constant { value: -0.1 },
            0,
        );
        assert!(r.is_err());
    }

    #[test]
    fn degenerate_magnitudes() {
        let m = MagnitudeParams::new(vec![3.0; 4], vec![0.0; 4]).unwrap();
        let mut rng = rng::stream(1, &[]);
        assert_eq!(sample_magnitudes(&[true; 4], &m, &mut rng), vec![3.0; 4]);
        assert_eq!(sample_magnitudes(&[false; 4], &m, &mut rng), vec![0.0; 4]);
        let five = MagnitudeParams::new(vec![5.0], vec![0.0]).unwrap();
        assert_eq!(sample_magnitudes(&[true], &five, &mut rng), vec![5.0]);
    }

    #[test]
    fn half_of_centered_draws_are_zero() {
        let m = MagnitudeParams::new(vec![0.0], vec![1.0]).unwrap();
        let mut rng = rng::stream(2, &[]);
        let zeros = (0..1_000_000).filter(|_| m.draw(0, &mut rng) == 0.0).count();
        assert!((zeros as f64 / 1e6 - 0.5).abs() < 0.002);
    }

    proptest! {
        #[test]
        fn zipf_is_monotone_with_exact_endpoints(
            n in 2usize..2000, lo in 1e-4f64..0.2, span in 0.0f64..0.8, alpha in 0.05f64..3.0
        ) {
            let hi = (lo + span).min(1.0);
            let p = zipfian_probs(n, lo, hi, alpha).unwrap();
            let p = p.as_slice();
            prop_assert_eq!(p[0], hi);
            prop_assert!((p[n - 1] - lo).abs() <= 1e-12);
            prop_assert!(p.windows(2).all(|w| w[1] <= w[0]));
        }

        #[test]
        fn magnitudes_are_nonnegative(mu in -5.0f32..5.0, sigma in 0.0f32..3.0, seed in 0u64..50) {
            let m = MagnitudeParams::new(vec![mu; 64], vec![sigma; 64]).unwrap();
            let z: Vec<bool> = (0..64).map(|i| i % 3 != 0).collect();
            let c = sample_magnitudes(&z, &m, &mut rng::stream(seed, &[]));
            for (ci, zi) in c.iter().zip(&z) {
                prop_assert!(*ci >= 0.0);
                if !zi { prop_assert_eq!(*ci, 0.0); }
            }
        }
    }
}
