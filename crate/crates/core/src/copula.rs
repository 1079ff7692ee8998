//! Low-rank Gaussian copula for correlated binary firings.

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{config_err, Error, Result};
use crate::firing::FiringProbabilities;
use crate::normal::upper_quantile;
use crate::rng::{self, domain, StreamRng};

pub const DEFAULT_DELTA_MIN: f64 = 0.01;

/// `Σ = F Fᵀ + diag(δ)` with unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankCorrelation {
    factors: Array2<f32>,
    /// `factors` transposed, so sampling is a sequence of contiguous axpys.
    factors_t: Array2<f32>,
    diag: Vec<f32>,
    sqrt_diag: Vec<f32>,
}

impl LowRankCorrelation {
    /// `F_ij ~ s·N(0,1)`, shrunk as a whole if any residual variance would
    /// drop below `delta_min`.
    pub fn generate(n: usize, rank: usize, scale: f64, delta_min: f64, seed: u64) -> Result<Self> {
        if !(scale >= 0.0) || !scale.is_finite() {
            return Err(config_err(format!("correlation scale must be >= 0, got {scale}")));
        }
        if !(0.0..1.0).contains(&delta_min) {
            return Err(config_err(format!("delta_min must be in [0, 1), got {delta_min}")));
        }
        let mut rng = rng::stream(seed, &[domain::CORRELATION]);
        let mut factors = Array2::<f32>::zeros((n, rank));
        for v in factors.iter_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *v = (scale * e) as f32;
        }
        let max_sq = factors
            .outer_iter()
            .map(|row| row.iter().map(|&v| v as f64 * v as f64).sum::<f64>())
            .fold(0.0, f64::max);
        if 1.0 - max_sq < delta_min {
            let shrink = ((1.0 - delta_min) / max_sq).sqrt();
            factors.mapv_inplace(|v| (v as f64 * shrink) as f32);
        }
        Self::from_factors(factors, delta_min)
    }

    /// Build from explicit factors. Fails if any row's squared norm leaves
    /// less than `delta_min` residual variance.
    pub fn from_factors(factors: Array2<f32>, delta_min: f64) -> Result<Self> {
        let mut diag = Vec::with_capacity(factors.nrows());
        for (i, row) in factors.outer_iter().enumerate() {
            let sq: f64 = row.iter().map(|&v| v as f64 * v as f64).sum();
            let d = 1.0 - sq;
            // tolerate the rounding left over from a shrink to exactly delta_min
            if !(d >= delta_min - 1e-6) {
                return Err(config_err(format!(
                    "factor row {i} leaves residual variance {d} < {delta_min}"
                )));
            }
            diag.push(d.max(0.0) as f32);
        }
        let factors_t = factors.t().as_standard_layout().to_owned();
        let sqrt_diag = diag.iter().map(|&d| d.sqrt()).collect();
        Ok(Self {
            factors,
            factors_t,
            diag,
            sqrt_diag,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self::from_factors(Array2::zeros((n, 0)), 0.0).expect("rank 0 is always valid")
    }

    pub fn n_features(&self) -> usize {
        self.factors.nrows()
    }

    pub fn rank(&self) -> usize {
        self.factors.ncols()
    }

    pub fn factors(&self) -> &Array2<f32> {
        &self.factors
    }

    pub fn diag(&self) -> &[f32] {
        &self.diag
    }

    /// `Σ_ij` for one pair; `1` on the diagonal.
    pub fn correlation(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 1.0;
        }
        self.factors
            .row(i)
            .iter()
            .zip(self.factors.row(j))
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum()
    }

    /// One latent Gaussian vector `g = Fε + √δ ⊙ η`, written into `g`.
    pub fn sample_latent(&self, rng: &mut StreamRng, g: &mut [f32]) {
        debug_assert_eq!(g.len(), self.n_features());
        g.fill(0.0);
        for ft in self.factors_t.outer_iter() {
            let e: f32 = rng.sample(StandardNormal);
            let ft = ft.as_slice().expect("standard layout");
            g.iter_mut().zip(ft).for_each(|(gi, &f)| *gi += e * f);
        }
        for (gi, &s) in g.iter_mut().zip(&self.sqrt_diag) {
            let eta: f32 = rng.sample(StandardNormal);
            *gi += s * eta;
        }
    }

    /// Indices `i` (ascending) with `gᵢ > τᵢ` for one fresh sample of `g`.
    pub fn sample_fired(
        &self,
        tau: &FiringThresholds,
        rng: &mut StreamRng,
        scratch: &mut Vec<f32>,
        fired: &mut Vec<u32>,
    ) {
        scratch.resize(self.n_features(), 0.0);
        self.sample_latent(rng, scratch);
        fired.clear();
        fired.extend(
            scratch
                .iter()
                .zip(&tau.0)
                .enumerate()
                .filter(|(_, (&g, &t))| g > t)
                .map(|(i, _)| i as u32),
        );
    }
}

/// Per-feature firing thresholds `τᵢ = Φ⁻¹(1 − pᵢ)`; `p = 1` maps to `-∞`.
#[derive(Debug, Clone, PartialEq)]
pub struct FiringThresholds(Vec<f32>);

impl FiringThresholds {
    pub fn from_probs(p: &FiringProbabilities) -> Self {
        Self(p.as_slice().iter().map(|&p| upper_quantile(p) as f32).collect())
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }
}

/// Thresholds for raw probabilities, which must lie in `(0, 1)`.
pub fn thresholds_from_probs(p: &[f64]) -> Result<FiringThresholds> {
    if let Some((i, v)) = p.iter().enumerate().find(|(_, &v)| !(v > 0.0 && v < 1.0)) {
        return Err(Error::Config(format!("probability {i} is {v}, expected (0, 1)")));
    }
    Ok(FiringThresholds(p.iter().map(|&v| upper_quantile(v) as f32).collect()))
}

/// Dense `batch × N` firing indicators. Row `r` of batch `k` uses the stream
/// `(seed, SAMPLE, k, r)`, the same one the full generator starts from.
pub fn sample_firings(
    corr: &LowRankCorrelation,
    tau: &FiringThresholds,
    batch: usize,
    batch_index: u64,
    seed: u64,
) -> Result<Array2<u8>> {
    let n = corr.n_features();
    if tau.0.len() != n {
        return Err(Error::Shape(format!("{} thresholds for {n} features", tau.0.len())));
    }
    let mut out = Array2::<u8>::zeros((batch, n));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each_init(
            || (Vec::new(), Vec::new()),
            |(scratch, fired), (r, mut row)| {
                let mut rng = rng::stream(seed, &[domain::SAMPLE, batch_index, r as u64]);
                corr.sample_fired(tau, &mut rng, scratch, fired);
                for &i in fired.iter() {
                    row[i as usize] = 1;
                }
            },
        );
    Ok(out)
}
