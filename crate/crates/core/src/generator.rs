//! The full generative pipeline: copula firings, rectified-Gaussian
//! magnitudes, hierarchy, then `a = Σ cᵢdᵢ + b`.

use std::path::Path;
use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::copula::{FiringThresholds, LowRankCorrelation, DEFAULT_DELTA_MIN};
use crate::dictionary::{FeatureDictionary, OrthoConfig};
use crate::error::{config_err, Error, Result};
use crate::firing::{magnitude_params, FiringProbabilities, MagnitudeParams, MagnitudeSpec, ProbSpec};
use crate::hierarchy::{compensate_probs, HierarchyConfig, HierarchyForest};
use crate::rng::{self, domain, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrelationConfig {
    pub rank: usize,
    pub scale: f64,
    #[serde(default = "default_delta_min")]
    pub delta_min: f64,
}

fn default_delta_min() -> f64 {
    DEFAULT_DELTA_MIN
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub seed: u64,
    pub n_features: usize,
    pub hidden_dim: usize,
    #[serde(default)]
    pub bias_norm: f64,
    #[serde(default)]
    pub orthogonalization: OrthoConfig,
    pub firing: ProbSpec,
    pub magnitude_mean: MagnitudeSpec,
    pub magnitude_std: MagnitudeSpec,
    pub correlation: CorrelationConfig,
    #[serde(default)]
    pub hierarchy: Option<HierarchyConfig>,
    #[serde(default = "default_true")]
    pub compensate: bool,
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    pub fn synthsaebench_16k(seed: u64) -> Self {
        Self {
            seed,
            n_features: 16384,
            hidden_dim: 768,
            bias_norm: 10.0,
            orthogonalization: OrthoConfig {
                steps: 100,
                lr: 3e-4,
                unit_norm_weight: 1.0,
                chunk_size: 1024,
            },
            firing: ProbSpec::Zipfian {
                p_min: 5e-4,
                p_max: 0.4,
                exponent: 0.5,
            },
            magnitude_mean: MagnitudeSpec::Linear { start: 5.0, end: 4.0 },
            magnitude_std: MagnitudeSpec::FoldedNormal { mean: 0.5, std: 0.5 },
            correlation: CorrelationConfig {
                rank: 25,
                scale: 0.1,
                delta_min: DEFAULT_DELTA_MIN,
            },
            hierarchy: Some(HierarchyConfig {
                n_roots: 128,
                branching: 4,
                max_depth: 3,
                mutually_exclusive: true,
                parent_scaling: true,
                feature_offset: 0,
            }),
            compensate: true,
        }
    }

    /// CPU-sized variant: 2048 features in 256 dimensions, 16 roots, rank 13.
    pub fn desk(seed: u64) -> Self {
        let mut cfg = Self::synthsaebench_16k(seed);
        cfg.n_features = 2048;
        cfg.hidden_dim = 256;
        cfg.correlation.rank = 13;
        if let Some(h) = cfg.hierarchy.as_mut() {
            h.n_roots = 16;
        }
        cfg
    }

    pub fn preset(name: &str, seed: u64) -> Option<Self> {
        match name {
            "synthsaebench-16k" => Some(Self::synthsaebench_16k(seed)),
            "desk" => Some(Self::desk(seed)),
            _ => None,
        }
    }

    /// Same recipe at `n` features. The hierarchy keeps roughly the same
    /// share of features (at least one root when a tree fits), the factor
    /// rank is capped at `n`, and orthogonalization is left as configured.
    pub fn with_n_features(&self, n: usize) -> Self {
        let mut cfg = self.clone();
        cfg.correlation.rank = cfg.correlation.rank.min(n);
        if let Some(h) = cfg.hierarchy.as_mut() {
            let per_root = HierarchyConfig { n_roots: 1, ..*h }.node_count();
            let fit = n.saturating_sub(h.feature_offset) / per_root;
            let scaled = ((h.n_roots * n) as f64 / self.n_features as f64).round() as usize;
            h.n_roots = scaled.max(1).min(fit);
        }
        if cfg.hierarchy.is_some_and(|h| h.n_roots == 0) {
            cfg.hierarchy = None;
        }
        cfg.n_features = n;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_features == 0 || self.hidden_dim == 0 {
            return Err(config_err("n_features and hidden_dim must be >= 1"));
        }
        if !(self.bias_norm >= 0.0) {
            return Err(config_err("bias_norm must be >= 0"));
        }
        if let Some(h) = &self.hierarchy {
            let need = h.feature_offset + h.node_count();
            if need > self.n_features {
                return Err(config_err(format!(
                    "hierarchy needs {need} features, model has {}",
                    self.n_features
                )));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }
}

/// Ground-truth coefficients in compressed-row form.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCoefficients {
    pub n_cols: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<u32>,
    pub vals: Vec<f32>,
}

impl SparseCoefficients {
    pub fn n_rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn row(&self, r: usize) -> (&[u32], &[f32]) {
        let (a, b) = (self.row_ptr[r], self.row_ptr[r + 1]);
        (&self.cols[a..b], &self.vals[a..b])
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn to_dense(&self) -> Array2<f32> {
        let mut out = Array2::zeros((self.n_rows(), self.n_cols));
        for r in 0..self.n_rows() {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                out[[r, c as usize]] = v;
            }
        }
        out
    }

    fn from_rows(n_cols: usize, rows: Vec<Vec<(u32, f32)>>) -> Self {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        row_ptr.push(0);
        let nnz = rows.iter().map(Vec::len).sum();
        let mut cols = Vec::with_capacity(nnz);
        let mut vals = Vec::with_capacity(nnz);
        for row in rows {
            for (c, v) in row {
                cols.push(c);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }
        Self {
            n_cols,
            row_ptr,
            cols,
            vals,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBatch {
    pub activations: Array2<f32>,
    /// Nonzero coefficients after the hierarchy; a feature "fires" in a
    /// sample exactly when it has an entry here.
    pub coefficients: Option<SparseCoefficients>,
    pub seed: u64,
    pub batch_index: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticModel {
    pub config: ModelConfig,
    pub dictionary: FeatureDictionary,
    /// Target firing probabilities.
    pub probs_base: FiringProbabilities,
    /// Probabilities actually fed to the copula (compensated when enabled).
    pub probs: FiringProbabilities,
    pub mags: MagnitudeParams,
    pub corr: LowRankCorrelation,
    pub forest: Option<HierarchyForest>,
    thresholds: FiringThresholds,
    mean_mags: Vec<f32>,
    config_digest: String,
}

fn round_probs(p: &[f64]) -> Result<FiringProbabilities> {
    FiringProbabilities::new(p.iter().map(|&v| v as f32 as f64).collect())
}

impl SyntheticModel {
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let (n, d, seed) = (config.n_features, config.hidden_dim, config.seed);
        let mut dictionary = FeatureDictionary::init_random(n, d, seed)?;
        if config.orthogonalization.steps > 0 {
            dictionary = dictionary.orthogonalize(&config.orthogonalization)?;
        }
        let dictionary = dictionary.with_bias_norm(config.bias_norm as f32, seed)?;
        // probabilities are held at f32 precision so the container stores them losslessly
        let probs_base = round_probs(config.firing.build(n, seed)?.as_slice())?;
        let mags = magnitude_params(n, &config.magnitude_mean, &config.magnitude_std, seed)?;
        let corr = LowRankCorrelation::generate(
            n,
            config.correlation.rank,
            config.correlation.scale,
            config.correlation.delta_min,
            seed,
        )?;
        let forest = config
            .hierarchy
            .as_ref()
            .map(|h| HierarchyForest::build(h, n))
            .transpose()?;
        let probs = match (&forest, config.compensate) {
            (Some(f), true) => round_probs(&compensate_probs(probs_base.as_slice(), f).p_corrected)?,
            _ => probs_base.clone(),
        };
        Self::assemble(config.clone(), dictionary, probs_base, probs, mags, corr, forest)
    }

    fn assemble(
        config: ModelConfig,
        dictionary: FeatureDictionary,
        probs_base: FiringProbabilities,
        probs: FiringProbabilities,
        mags: MagnitudeParams,
        corr: LowRankCorrelation,
        forest: Option<HierarchyForest>,
    ) -> Result<Self> {
        let n = dictionary.n_features();
        let lens = [probs_base.len(), probs.len(), mags.len(), corr.n_features()];
        if lens.iter().any(|&l| l != n) || forest.as_ref().is_some_and(|f| f.n_features() != n) {
            return Err(Error::Shape(format!("model components disagree on N = {n}")));
        }
        let thresholds = FiringThresholds::from_probs(&probs);
        let mean_mags = mags.rectified_means().into_iter().map(|m| m as f32).collect();
        let config_digest = crate::container::hex(&sha2_digest(config.to_toml().as_bytes()));
        Ok(Self {
            config,
            dictionary,
            probs_base,
            probs,
            mags,
            corr,
            forest,
            thresholds,
            mean_mags,
            config_digest,
        })
    }

    pub fn n_features(&self) -> usize {
        self.dictionary.n_features()
    }

    pub fn hidden_dim(&self) -> usize {
        self.dictionary.hidden_dim()
    }

    pub fn config_digest(&self) -> &str {
        &self.config_digest
    }

    pub fn thresholds(&self) -> &FiringThresholds {
        &self.thresholds
    }

    pub fn mean_magnitudes(&self) -> &[f32] {
        &self.mean_mags
    }

    /// Sample `batch_size` activations. Row `r` draws everything from the
    /// stream `(seed, SAMPLE, batch_index, r)`, so output does not depend on
    /// thread count or on which other batches were sampled.
    pub fn sample_batch(
        &self,
        batch_size: usize,
        batch_index: u64,
        seed: u64,
        keep_ground_truth: bool,
    ) -> ActivationBatch {
        let d = self.hidden_dim();
        let mut activations = Array2::<f32>::zeros((batch_size, d));
        let rows: Vec<Vec<(u32, f32)>> = activations
            .axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .map_init(
                || RowScratch::new(self.n_features()),
                |scratch, (r, mut out)| {
                    let mut rng = rng::stream(seed, &[domain::SAMPLE, batch_index, r as u64]);
                    let coeffs = self.sample_row(&mut rng, scratch);
                    self.decode_row(&coeffs, out.as_slice_mut().expect("row-major"));
                    if keep_ground_truth {
                        coeffs
                    } else {
                        Vec::new()
                    }
                },
            )
            .collect();
        let coefficients = keep_ground_truth.then(|| SparseCoefficients::from_rows(self.n_features(), rows));
        ActivationBatch {
            activations,
            coefficients,
            seed,
            batch_index,
        }
    }

    fn sample_row(&self, rng: &mut StreamRng, s: &mut RowScratch) -> Vec<(u32, f32)> {
        self.corr.sample_fired(&self.thresholds, rng, &mut s.latent, &mut s.fired);
        self.magnitudes_and_hierarchy(rng, s)
    }

    fn magnitudes_and_hierarchy(&self, rng: &mut StreamRng, s: &mut RowScratch) -> Vec<(u32, f32)> {
        for &i in &s.fired {
            s.coeffs[i as usize] = self.mags.draw(i as usize, rng);
        }
        if let Some(forest) = &self.forest {
            let key = rng.next_u64();
            forest.apply_row(&mut s.coeffs, &self.mean_mags, key);
        }
        self.collect_nonzero(s)
    }

    fn collect_nonzero(&self, s: &mut RowScratch) -> Vec<(u32, f32)> {
        let mut out = Vec::with_capacity(s.fired.len());
        for &i in &s.fired {
            let v = s.coeffs[i as usize];
            if v > 0.0 {
                out.push((i, v));
            }
            s.coeffs[i as usize] = 0.0;
        }
        out
    }

    /// `out = b + Σ cᵢ dᵢ`.
    fn decode_row(&self, coeffs: &[(u32, f32)], out: &mut [f32]) {
        out.copy_from_slice(self.dictionary.bias().as_slice().expect("contiguous"));
        let dirs = self.dictionary.directions();
        for &(i, c) in coeffs {
            let d = dirs.row(i as usize);
            out.iter_mut()
                .zip(d.as_slice().expect("row-major"))
                .for_each(|(o, &di)| *o += c * di);
        }
    }

    /// Single-threaded sampling, one stage at a time across the batch, with
    /// per-stage wall-clock timings. Produces the same batch as
    /// [`Self::sample_batch`].
    pub fn sample_batch_staged(
        &self,
        batch_size: usize,
        batch_index: u64,
        seed: u64,
    ) -> (ActivationBatch, StageTimings) {
        let n = self.n_features();
        let mut t = StageTimings::default();
        let mut rngs: Vec<StreamRng> = (0..batch_size)
            .map(|r| rng::stream(seed, &[domain::SAMPLE, batch_index, r as u64]))
            .collect();
        let mut latent = Vec::new();
        let start = Instant::now();
        let fired: Vec<Vec<u32>> = rngs
            .iter_mut()
            .map(|rng| {
                let mut f = Vec::new();
                self.corr.sample_fired(&self.thresholds, rng, &mut latent, &mut f);
                f
            })
            .collect();
        t.copula += start.elapsed().as_secs_f64();

        let start = Instant::now();
        let mut dense = Array2::<f32>::zeros((batch_size, n));
        for ((rng, f), mut row) in rngs.iter_mut().zip(&fired).zip(dense.outer_iter_mut()) {
            for &i in f {
                row[i as usize] = self.mags.draw(i as usize, rng);
            }
        }
        t.magnitudes += start.elapsed().as_secs_f64();

        let start = Instant::now();
        if let Some(forest) = &self.forest {
            for (rng, mut row) in rngs.iter_mut().zip(dense.outer_iter_mut()) {
                let key = rng.next_u64();
                forest.apply_row(row.as_slice_mut().unwrap(), &self.mean_mags, key);
            }
        }
        let rows: Vec<Vec<(u32, f32)>> = fired
            .iter()
            .zip(dense.outer_iter())
            .map(|(f, row)| {
                f.iter()
                    .filter(|&&i| row[i as usize] > 0.0)
                    .map(|&i| (i, row[i as usize]))
                    .collect()
            })
            .collect();
        t.hierarchy += start.elapsed().as_secs_f64();

        let start = Instant::now();
        let mut activations = Array2::<f32>::zeros((batch_size, self.hidden_dim()));
        for (coeffs, mut out) in rows.iter().zip(activations.outer_iter_mut()) {
            self.decode_row(coeffs, out.as_slice_mut().unwrap());
        }
        t.matmul += start.elapsed().as_secs_f64();

        let batch = ActivationBatch {
            activations,
            coefficients: Some(SparseCoefficients::from_rows(n, rows)),
            seed,
            batch_index,
        };
        (batch, t)
    }

    /// Mean of `activations` over a sample, used as a decoder-bias init.
    pub fn empirical_mean(&self, n_samples: usize, seed: u64) -> Array1<f32> {
        let b = self.sample_batch(n_samples, 0, seed, false);
        b.activations.mean_axis(Axis(0)).expect("non-empty")
    }

    pub fn to_container(&self) -> Container {
        let n = self.n_features();
        let mut c = Container::new(self.config.to_toml());
        c.push_matrix("directions", self.dictionary.directions());
        c.push_f32("bias", &[self.hidden_dim()], self.dictionary.bias().to_vec());
        let f32s = |p: &FiringProbabilities| p.as_slice().iter().map(|&v| v as f32).collect();
        c.push_f32("probs_base", &[n], f32s(&self.probs_base));
        c.push_f32("probs", &[n], f32s(&self.probs));
        c.push_f32("mag_mu", &[n], self.mags.mu.clone());
        c.push_f32("mag_sigma", &[n], self.mags.sigma.clone());
        c.push_matrix("corr_factors", self.corr.factors());
        c.push_f32("corr_diag", &[n], self.corr.diag().to_vec());
        if let Some(f) = &self.forest {
            c.push_i32("hier_parent", &[n], f.parents_raw().to_vec());
            let flags = |v: &[bool]| v.iter().map(|&b| b as i32).collect();
            c.push_i32("hier_me_flags", &[n], flags(f.me_flags()));
            c.push_i32("hier_scale_flags", &[n], flags(f.scale_flags()));
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let config: ModelConfig =
            toml::from_str(&c.config).map_err(|e| config_err(format!("stored model config: {e}")))?;
        let dictionary = FeatureDictionary::new(c.matrix("directions")?, c.array1("bias")?)?;
        let probs = |name: &str| -> Result<FiringProbabilities> {
            FiringProbabilities::new(c.vec_f32(name)?.into_iter().map(|v| v as f64).collect())
        };
        let mags = MagnitudeParams::new(c.vec_f32("mag_mu")?, c.vec_f32("mag_sigma")?)?;
        let corr = LowRankCorrelation::from_factors(c.matrix("corr_factors")?, config.correlation.delta_min)?;
        let forest = if c.has("hier_parent") {
            let flags = |name: &str| -> Result<Vec<bool>> { Ok(c.vec_i32(name)?.into_iter().map(|v| v != 0).collect()) };
            Some(HierarchyForest::from_parents(
                c.vec_i32("hier_parent")?,
                flags("hier_me_flags")?,
                flags("hier_scale_flags")?,
            )?)
        } else {
            None
        };
        Self::assemble(config, dictionary, probs("probs_base")?, probs("probs")?, mags, corr, forest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_container().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }

    /// Sample throughput over `n_batches` batches; the first is a warmup
    /// and excluded from the totals.
    pub fn throughput_bench(&self, batch_size: usize, n_batches: usize, seed: u64) -> Result<BenchReport> {
        if n_batches < 2 || batch_size == 0 {
            return Err(config_err("benchmark needs n_batches >= 2 and batch_size >= 1"));
        }
        let mut stages = StageTimings::default();
        let mut total = 0.0;
        for k in 0..n_batches {
            let start = Instant::now();
            let (_, t) = self.sample_batch_staged(batch_size, k as u64, seed);
            let elapsed = start.elapsed().as_secs_f64();
            if k > 0 {
                total += elapsed;
                stages.add(&t);
            }
        }
        let samples = (batch_size * (n_batches - 1)) as f64;
        Ok(BenchReport {
            n_features: self.n_features(),
            hidden_dim: self.hidden_dim(),
            batch_size,
            n_batches,
            samples_per_second: samples / total,
            seconds_per_sample: total / samples,
            stages,
        })
    }
}

fn sha2_digest(bytes: &[u8]) -> Vec<u8> {
    use sha2::Digest;
    sha2::Sha256::digest(bytes).to_vec()
}

struct RowScratch {
    latent: Vec<f32>,
    fired: Vec<u32>,
    coeffs: Vec<f32>,
}

impl RowScratch {
    fn new(n: usize) -> Self {
        Self {
            latent: Vec::with_capacity(n),
            fired: Vec::new(),
            coeffs: vec![0.0; n],
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub copula: f64,
    pub magnitudes: f64,
    pub hierarchy: f64,
    pub matmul: f64,
}

impl StageTimings {
    fn add(&mut self, o: &StageTimings) {
        self.copula += o.copula;
        self.magnitudes += o.magnitudes;
        self.hierarchy += o.hierarchy;
        self.matmul += o.matmul;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub n_features: usize,
    pub hidden_dim: usize,
    pub batch_size: usize,
    pub n_batches: usize,
    pub samples_per_second: f64,
    pub seconds_per_sample: f64,
    pub stages: StageTimings,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(seed: u64) -> ModelConfig {
        let mut cfg = ModelConfig::desk(seed);
        cfg.n_features = 200;
        cfg.hidden_dim = 32;
        cfg.orthogonalization.steps = 5;
        cfg.correlation.rank = 4;
        cfg.hierarchy = Some(HierarchyConfig {
            n_roots: 4,
            branching: 3,
            max_depth: 2,
            mutually_exclusive: true,
            parent_scaling: true,
            feature_offset: 0,
        });
        cfg
    }

    #[test]
    fn deterministic_all_ones_pipeline() {
        let n = 8;
        let mut cfg = small_config(0);
        cfg.n_features = n;
        cfg.hidden_dim = n;
        cfg.bias_norm = 0.0;
        cfg.orthogonalization.steps = 0;
        cfg.firing = ProbSpec::Constant { p: 1.0 };
        cfg.magnitude_mean = MagnitudeSpec::Constant { value: 1.0 };
        cfg.magnitude_std = MagnitudeSpec::Constant { value: 0.0 };
        cfg.correlation.rank = 0;
        cfg.hierarchy = None;
        let mut model = SyntheticModel::build(&cfg).unwrap();
        model.dictionary = FeatureDictionary::new(Array2::eye(n), Array1::zeros(n)).unwrap();
        let b = model.sample_batch(5, 0, 1, true);
        assert!(b.activations.iter().all(|&v| v == 1.0));
        assert_eq!(b.coefficients.unwrap().nnz(), 5 * n);
    }

    #[test]
    fn reconstruction_identity_and_hierarchy_invariants() {
        let model = SyntheticModel::build(&small_config(3)).unwrap();
        let b = model.sample_batch(300, 2, 11, true);
        let coeffs = b.coefficients.as_ref().unwrap();
        let dense = coeffs.to_dense();
        let recon = dense.dot(model.dictionary.directions()) + model.dictionary.bias();
        for (a, r) in b.activations.iter().zip(recon.iter()) {
            assert!((a - r).abs() <= 1e-4 * r.abs().max(1.0));
        }
        let forest = model.forest.as_ref().unwrap();
        for row in dense.outer_iter() {
            for i in 0..model.n_features() {
                if let Some(p) = forest.parent(i) {
                    assert!(!(row[i] > 0.0) || row[p] > 0.0);
                }
                if forest.is_me(i) {
                    assert!(forest.children(i).iter().filter(|&&k| row[k as usize] > 0.0).count() <= 1);
                }
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_across_threads_and_keep_flag() {
        let model = SyntheticModel::build(&small_config(1)).unwrap();
        let a = model.sample_batch(64, 7, 5, true);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let b = pool.install(|| model.sample_batch(64, 7, 5, true));
        assert_eq!(a, b);
        let c = model.sample_batch(64, 7, 5, false);
        assert_eq!(a.activations, c.activations);
        assert!(c.coefficients.is_none());
        let (staged, _) = model.sample_batch_staged(64, 7, 5);
        assert_eq!(a.activations, staged.activations);
        assert_eq!(a.coefficients, staged.coefficients);
    }

    #[test]
    fn scaling_feature_count_keeps_hierarchy_share() {
        let desk = ModelConfig::desk(0);
        let big = desk.with_n_features(16384);
        assert_eq!(big.hierarchy.unwrap().n_roots, 128);
        let small = desk.with_n_features(128);
        assert_eq!(small.hierarchy.unwrap().n_roots, 1);
        assert!(small.validate().is_ok());
        assert!(desk.with_n_features(64).hierarchy.is_none());
        assert_eq!(desk.with_n_features(8).correlation.rank, 8);
    }

    #[test]
    fn save_load_round_trip() {
        let model = SyntheticModel::build(&small_config(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ssae");
        model.save(&path).unwrap();
        let back = SyntheticModel::load(&path).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.to_container(), model.to_container());
        assert_eq!(back.sample_batch(8, 0, 0, true), model.sample_batch(8, 0, 0, true));
    }

    #[test]
    fn desk_preset_shape() {
        let cfg = ModelConfig::desk(0);
        assert_eq!(cfg.hierarchy.unwrap().node_count(), 1360);
        let back: ModelConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn bench_reports_positive_throughput() {
        let model = SyntheticModel::build(&small_config(0)).unwrap();
        let r = model.throughput_bench(64, 3, 0).unwrap();
        assert!(r.samples_per_second.is_finite() && r.samples_per_second > 0.0);
        assert!(model.throughput_bench(64, 1, 0).is_err());
    }
}
