//! Sparse autoencoder architectures, their forward passes, loss terms and
//! hand-written gradients.
//!
//! Weights are stored latent-major: row `j` of `w_enc` is latent `j`'s
//! encoder vector and row `j` of `w_dec` its decoder direction, so the
//! decoder matrix in the usual `D × L` orientation is `w_decᵀ`.

use std::cmp::Ordering;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{config_err, Error, Result};
use crate::linalg::{argmax, axpy, dot, matmul_t};
use crate::rng::{self, domain};

/// Fraction of nonzeros above which dense matrix products replace sparse
/// accumulation.
const DENSE_CUTOFF: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    L1,
    JumpRelu {
        #[serde(default = "default_bandwidth")]
        bandwidth: f32,
    },
    BatchTopK {
        k: usize,
    },
    MatryoshkaBatchTopK {
        k: usize,
        prefixes: Vec<usize>,
    },
    MatchingPursuit {
        k: usize,
    },
}

fn default_bandwidth() -> f32 {
    0.05
}

impl Architecture {
    pub fn name(&self) -> &'static str {
        match self {
            Architecture::L1 => "l1",
            Architecture::JumpRelu { .. } => "jumprelu",
            Architecture::BatchTopK { .. } => "batchtopk",
            Architecture::MatryoshkaBatchTopK { .. } => "matryoshka",
            Architecture::MatchingPursuit { .. } => "matching_pursuit",
        }
    }

    pub fn has_encoder(&self) -> bool {
        !matches!(self, Architecture::MatchingPursuit { .. })
    }

    /// Architectures whose decoder rows are renormalized after every step.
    pub fn normalizes_decoder(&self) -> bool {
        matches!(self, Architecture::L1 | Architecture::MatchingPursuit { .. })
    }

    /// Whether the loss has a tunable sparsity penalty.
    pub fn has_sparsity_penalty(&self) -> bool {
        matches!(self, Architecture::L1 | Architecture::JumpRelu { .. })
    }

    pub fn uses_topk_aux(&self) -> bool {
        matches!(
            self,
            Architecture::JumpRelu { .. } | Architecture::BatchTopK { .. } | Architecture::MatryoshkaBatchTopK { .. }
        )
    }

    fn validate(&self, width: usize) -> Result<()> {
        match self {
            Architecture::JumpRelu { bandwidth } if !(*bandwidth > 0.0) => {
                Err(config_err(format!("jumprelu bandwidth must be > 0, got {bandwidth}")))
            }
            Architecture::BatchTopK { k } | Architecture::MatchingPursuit { k } if *k == 0 => {
                Err(config_err("k must be >= 1"))
            }
            Architecture::MatryoshkaBatchTopK { k, prefixes } => {
                if *k == 0 {
                    return Err(config_err("k must be >= 1"));
                }
                if prefixes.is_empty()
                    || prefixes[0] == 0
                    || prefixes.windows(2).any(|w| w[0] >= w[1])
                    || *prefixes.last().unwrap() != width
                {
                    return Err(config_err(format!(
                        "matryoshka prefixes must be strictly increasing and end at width {width}, got {prefixes:?}"
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Latent index ranges `[start, end)` sharing one reconstruction target.
    fn ranges(&self, width: usize) -> Vec<(usize, usize)> {
        match self {
            Architecture::MatryoshkaBatchTopK { prefixes, .. } => {
                let mut start = 0;
                prefixes
                    .iter()
                    .map(|&m| {
                        let r = (start, m);
                        start = m;
                        r
                    })
                    .collect()
            }
            _ => vec![(0, width)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaeConfig {
    pub arch: Architecture,
    pub width: usize,
    /// Initial decoder row norm; defaults to 0.5 for JumpReLU and 0.1
    /// otherwise.
    #[serde(default)]
    pub init_norm: Option<f32>,
    #[serde(default = "default_jump_threshold")]
    pub jump_threshold_init: f32,
}

fn default_jump_threshold() -> f32 {
    0.5
}

impl SaeConfig {
    pub fn new(arch: Architecture, width: usize) -> Self {
        Self {
            arch,
            width,
            init_norm: None,
            jump_threshold_init: default_jump_threshold(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaeModel {
    pub arch: Architecture,
    pub w_enc: Option<Array2<f32>>,
    pub b_enc: Option<Array1<f32>>,
    pub w_dec: Array2<f32>,
    pub b_dec: Array1<f32>,
    /// JumpReLU thresholds, one per latent.
    pub threshold: Option<Array1<f32>>,
    /// Global activation cutoff for single-sample BatchTopK inference.
    pub inference_threshold: Option<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpTrace {
    /// Per row, `(latent, coefficient)` in selection order.
    pub steps: Vec<Vec<(u32, f32)>>,
    /// `residuals[t]` is the `B × D` residual before step `t`; the last
    /// entry is the final residual.
    pub residuals: Vec<Array2<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardResult {
    /// Encoder pre-activations (absent for matching pursuit).
    pub pre: Option<Array2<f32>>,
    pub latents: Array2<f32>,
    pub recon: Array2<f32>,
    /// Matryoshka reconstructions from each prefix; the last equals `recon`.
    pub prefix_recons: Option<Vec<Array2<f32>>>,
    /// Per row, nonzero latents in ascending index order.
    pub active: Vec<Vec<(u32, f32)>>,
    /// Smallest kept pre-activation in a BatchTopK batch.
    pub batch_cutoff: Option<f32>,
    pub mp_trace: Option<MpTrace>,
}

impl ForwardResult {
    pub fn l0(&self) -> f64 {
        let nnz: usize = self.active.iter().map(Vec::len).sum();
        nnz as f64 / self.active.len().max(1) as f64
    }

    fn nnz(&self) -> usize {
        self.active.iter().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Effective sparsity coefficient (already scaled by warmup and
    /// autotuner).
    pub sparsity_coeff: f32,
    pub aux_coeff: f32,
    pub k_aux: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    /// Mean squared error of the full reconstruction.
    pub mse: f64,
    /// Reconstruction term of the objective (sum over prefixes for
    /// matryoshka).
    pub recon_loss: f64,
    /// Unscaled sparsity measure (mean L1 or mean L0 per sample).
    pub sparsity: f64,
    pub sparsity_loss: f64,
    pub aux: f64,
    pub total: f64,
    pub l0: f64,
    pub num_dead: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaeGrads {
    pub w_enc: Option<Array2<f32>>,
    pub b_enc: Option<Array1<f32>>,
    pub w_dec: Array2<f32>,
    pub b_dec: Array1<f32>,
    pub threshold: Option<Array1<f32>>,
}

impl SaeGrads {
    pub fn zeros_like(sae: &SaeModel) -> Self {
        Self {
            w_enc: sae.w_enc.as_ref().map(|w| Array2::zeros(w.dim())),
            b_enc: sae.b_enc.as_ref().map(|b| Array1::zeros(b.len())),
            w_dec: Array2::zeros(sae.w_dec.dim()),
            b_dec: Array1::zeros(sae.b_dec.len()),
            threshold: sae.threshold.as_ref().map(|t| Array1::zeros(t.len())),
        }
    }

    /// Gradient buffers in the same order as [`SaeModel::params_mut`].
    pub fn slices(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = Vec::new();
        if let Some(w) = &self.w_enc {
            out.push(w.as_slice().unwrap());
        }
        if let Some(b) = &self.b_enc {
            out.push(b.as_slice().unwrap());
        }
        out.push(self.w_dec.as_slice().unwrap());
        out.push(self.b_dec.as_slice().unwrap());
        if let Some(t) = &self.threshold {
            out.push(t.as_slice().unwrap());
        }
        out
    }
}

fn random_unit_rows(rows: usize, cols: usize, seed: u64) -> Array2<f32> {
    let mut out = Array2::<f32>::zeros((rows, cols));
    for (j, mut row) in out.outer_iter_mut().enumerate() {
        let mut r = rng::stream(seed, &[domain::SAE_INIT, j as u64]);
        loop {
            row.iter_mut().for_each(|v| *v = r.sample::<f32, _>(StandardNormal));
            let n = row.dot(&row).sqrt();
            if n > 0.0 {
                row /= n;
                break;
            }
        }
    }
    out
}

impl SaeModel {
    /// Fresh SAE. Decoder rows are random directions scaled to the initial
    /// norm and the encoder starts as the decoder's transpose; L1 and
    /// matching pursuit keep a unit-norm decoder and (for L1) an encoder of
    /// norm `init_norm`. `b_dec` is usually the data mean.
    pub fn init(cfg: &SaeConfig, b_dec: Array1<f32>, seed: u64) -> Result<Self> {
        let (l, d) = (cfg.width, b_dec.len());
        if l == 0 || d == 0 {
            return Err(config_err("SAE width and input dimension must be >= 1"));
        }
        cfg.arch.validate(l)?;
        if let Architecture::BatchTopK { k } | Architecture::MatchingPursuit { k } = cfg.arch {
            if k > l {
                return Err(config_err(format!("k = {k} exceeds width {l}")));
            }
        }
        let norm = cfg.init_norm.unwrap_or(match cfg.arch {
            Architecture::JumpRelu { .. } => 0.5,
            _ => 0.1,
        });
        if !(norm > 0.0) {
            return Err(config_err("init_norm must be > 0"));
        }
        let dirs = random_unit_rows(l, d, seed);
        let (w_enc, w_dec) = match cfg.arch {
            Architecture::L1 => (Some(&dirs * norm), dirs),
            Architecture::MatchingPursuit { .. } => (None, dirs),
            _ => {
                let w = dirs * norm;
                (Some(w.clone()), w)
            }
        };
        let threshold = match cfg.arch {
            Architecture::JumpRelu { .. } => {
                if !(cfg.jump_threshold_init >= 0.0) {
                    return Err(config_err("jump_threshold_init must be >= 0"));
                }
                Some(Array1::from_elem(l, cfg.jump_threshold_init))
            }
            _ => None,
        };
        Ok(Self {
            b_enc: w_enc.as_ref().map(|_| Array1::zeros(l)),
            arch: cfg.arch.clone(),
            w_enc,
            w_dec,
            b_dec,
            threshold,
            inference_threshold: None,
        })
    }

    pub fn width(&self) -> usize {
        self.w_dec.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_dec.ncols()
    }

    /// Parameters in a fixed order: `w_enc, b_enc, w_dec, b_dec, threshold`
    /// (absent ones skipped).
    pub fn params_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = Vec::new();
        if let Some(w) = &mut self.w_enc {
            out.push(w.as_slice_mut().unwrap());
        }
        if let Some(b) = &mut self.b_enc {
            out.push(b.as_slice_mut().unwrap());
        }
        out.push(self.w_dec.as_slice_mut().unwrap());
        out.push(self.b_dec.as_slice_mut().unwrap());
        if let Some(t) = &mut self.threshold {
            out.push(t.as_slice_mut().unwrap());
        }
        out
    }

    pub fn normalize_decoder(&mut self) {
        for mut row in self.w_dec.outer_iter_mut() {
            let n = row.dot(&row).sqrt();
            if n > 0.0 {
                row /= n;
            }
        }
    }

    /// Keep JumpReLU thresholds nonnegative.
    pub fn clamp_thresholds(&mut self) {
        if let Some(t) = &mut self.threshold {
            t.mapv_inplace(|v| v.max(0.0));
        }
    }

    fn check_input(&self, x: ArrayView2<f32>) -> Result<()> {
        if x.ncols() != self.hidden_dim() {
            return Err(Error::Shape(format!(
                "input has width {}, SAE expects {}",
                x.ncols(),
                self.hidden_dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("SAE input".into()));
        }
        Ok(())
    }

    fn centered(&self, x: ArrayView2<f32>) -> Array2<f32> {
        &x - &self.b_dec
    }

    pub fn pre_activations(&self, x: ArrayView2<f32>) -> Option<Array2<f32>> {
        let w = self.w_enc.as_ref()?;
        let mut pre = matmul_t(self.centered(x).view(), w.view());
        pre += self.b_enc.as_ref().expect("encoder bias");
        Some(pre)
    }

    /// `latents · w_dec + b_dec`; affine in the latents for every
    /// architecture.
    pub fn decode(&self, latents: ArrayView2<f32>) -> Array2<f32> {
        let active = active_lists(latents);
        self.decode_active(&active, latents)
    }

    fn decode_active(&self, active: &[Vec<(u32, f32)>], latents: ArrayView2<f32>) -> Array2<f32> {
        let b = latents.nrows();
        let nnz: usize = active.iter().map(Vec::len).sum();
        let mut out = Array2::from_shape_fn((b, self.hidden_dim()), |(_, j)| self.b_dec[j]);
        if nnz as f64 > DENSE_CUTOFF * (b * self.width()) as f64 {
            general_mat_mul(1.0, &latents, &self.w_dec, 1.0, &mut out);
        } else {
            for (row, mut o) in active.iter().zip(out.outer_iter_mut()) {
                let o = o.as_slice_mut().unwrap();
                for &(j, f) in row {
                    axpy(f, self.w_dec.row(j as usize).as_slice().unwrap(), o);
                }
            }
        }
        out
    }

    pub fn forward(&self, x: ArrayView2<f32>) -> Result<ForwardResult> {
        self.check_input(x)?;
        if let Architecture::MatchingPursuit { k } = self.arch {
            return Ok(self.matching_pursuit_forward(x, k));
        }
        let pre = self.pre_activations(x).expect("encoder present");
        let (latents, batch_cutoff) = match &self.arch {
            Architecture::L1 => (pre.mapv(|v| v.max(0.0)), None),
            Architecture::JumpRelu { .. } => {
                let t = self.threshold.as_ref().expect("thresholds");
                let mut f = pre.clone();
                Zip::from(f.rows_mut()).for_each(|mut row| {
                    Zip::from(&mut row).and(t).for_each(|v, &th| {
                        if !(*v > th) {
                            *v = 0.0
                        }
                    })
                });
                (f, None)
            }
            Architecture::BatchTopK { k } | Architecture::MatryoshkaBatchTopK { k, .. } => {
                let (f, cutoff) = batch_topk(pre.view(), k * x.nrows());
                (f, cutoff)
            }
            Architecture::MatchingPursuit { .. } => unreachable!(),
        };
        Ok(self.finish_forward(Some(pre), latents, batch_cutoff))
    }

    /// BatchTopK-family forward that thresholds each pre-activation at the
    /// stored inference cutoff instead of ranking within the batch.
    pub fn forward_thresholded(&self, x: ArrayView2<f32>) -> Result<ForwardResult> {
        let cutoff = match (&self.arch, self.inference_threshold) {
            (Architecture::BatchTopK { .. } | Architecture::MatryoshkaBatchTopK { .. }, Some(c)) => c,
            _ => return self.forward(x),
        };
        self.check_input(x)?;
        let pre = self.pre_activations(x).expect("encoder present");
        let latents = pre.mapv(|v| if v >= cutoff && v > 0.0 { v } else { 0.0 });
        Ok(self.finish_forward(Some(pre), latents, None))
    }

    fn finish_forward(
        &self,
        pre: Option<Array2<f32>>,
        latents: Array2<f32>,
        batch_cutoff: Option<f32>,
    ) -> ForwardResult {
        let active = active_lists(latents.view());
        let (recon, prefix_recons) = match &self.arch {
            Architecture::MatryoshkaBatchTopK { prefixes, .. } => {
                let recons = self.prefix_recons(&active, prefixes);
                (recons.last().unwrap().clone(), Some(recons))
            }
            _ => (self.decode_active(&active, latents.view()), None),
        };
        ForwardResult {
            pre,
            latents,
            recon,
            prefix_recons,
            active,
            batch_cutoff,
            mp_trace: None,
        }
    }

    fn prefix_recons(&self, active: &[Vec<(u32, f32)>], prefixes: &[usize]) -> Vec<Array2<f32>> {
        let b = active.len();
        let d = self.hidden_dim();
        let mut cur = Array2::from_shape_fn((b, d), |(_, j)| self.b_dec[j]);
        let mut out = Vec::with_capacity(prefixes.len());
        let mut start = 0;
        for &m in prefixes {
            for (row, mut o) in active.iter().zip(cur.outer_iter_mut()) {
                let o = o.as_slice_mut().unwrap();
                for &(j, f) in row.iter().filter(|(j, _)| (start..m).contains(&(*j as usize))) {
                    axpy(f, self.w_dec.row(j as usize).as_slice().unwrap(), o);
                }
            }
            out.push(cur.clone());
            start = m;
        }
        out
    }

    /// `k` greedy steps per row: pick the decoder row with the largest dot
    /// product with the residual, subtract its projection. Correlations are
    /// updated through the decoder Gram matrix; the coefficient itself is
    /// recomputed exactly from the residual.
    pub fn matching_pursuit_forward(&self, x: ArrayView2<f32>, k: usize) -> ForwardResult {
        let (b, l, d) = (x.nrows(), self.width(), self.hidden_dim());
        let r0 = self.centered(x);
        let corr0 = matmul_t(r0.view(), self.w_dec.view());
        let gram = matmul_t(self.w_dec.view(), self.w_dec.view());
        let mut residuals = vec![Array2::<f32>::zeros((b, d)); k + 1];
        residuals[0].assign(&r0);
        let mut latents = Array2::<f32>::zeros((b, l));
        let mut steps = Vec::with_capacity(b);
        let mut r = vec![0.0f32; d];
        let mut corr = vec![0.0f32; l];
        for row in 0..b {
            r.copy_from_slice(r0.row(row).as_slice().unwrap());
            corr.copy_from_slice(corr0.row(row).as_slice().unwrap());
            let mut chosen = Vec::with_capacity(k);
            for t in 0..k {
                let j = argmax(&corr);
                let w = self.w_dec.row(j).to_slice().unwrap();
                let alpha = dot(w, &r);
                axpy(-alpha, w, &mut r);
                axpy(-alpha, gram.row(j).as_slice().unwrap(), &mut corr);
                latents[[row, j]] += alpha;
                chosen.push((j as u32, alpha));
                residuals[t + 1].row_mut(row).as_slice_mut().unwrap().copy_from_slice(&r);
            }
            steps.push(chosen);
        }
        let mut out = self.finish_forward(None, latents, None);
        out.mp_trace = Some(MpTrace { steps, residuals });
        out
    }

    /// Total loss and gradients for one batch. `dead` marks latents that
    /// receive the auxiliary loss.
    pub fn loss_and_grads(
        &self,
        x: ArrayView2<f32>,
        fwd: &ForwardResult,
        cfg: &LossConfig,
        dead: Option<&[bool]>,
    ) -> (LossTerms, SaeGrads) {
        self.loss_and_grads_with(x, fwd, cfg, dead, DENSE_CUTOFF)
    }

    fn loss_and_grads_with(
        &self,
        x: ArrayView2<f32>,
        fwd: &ForwardResult,
        cfg: &LossConfig,
        dead: Option<&[bool]>,
        dense_cutoff: f64,
    ) -> (LossTerms, SaeGrads) {
        let mut grads = SaeGrads::zeros_like(self);
        let mut terms = LossTerms {
            mse: mse(x, fwd.recon.view()),
            l0: fwd.l0(),
            ..Default::default()
        };
        if let Some(trace) = &fwd.mp_trace {
            terms.recon_loss = terms.mse;
            terms.total = terms.mse;
            self.mp_backward(x, fwd, trace, &mut grads);
            return (terms, grads);
        }
        let (b, l) = (x.nrows(), self.width());
        let bf = b as f32;
        let pre = fwd.pre.as_ref().expect("pre-activations");
        let ranges = self.arch.ranges(l);

        // upstream gradient w.r.t. the reconstruction each latent range feeds
        let recons: Vec<&Array2<f32>> = match &fwd.prefix_recons {
            Some(r) => r.iter().collect(),
            None => vec![&fwd.recon],
        };
        let mut upstream: Vec<Array2<f32>> = Vec::with_capacity(recons.len());
        for r in &recons {
            terms.recon_loss += mse(x, r.view());
            let g = (*r - &x) * (2.0 / bf);
            grads.b_dec += &g.sum_axis(Axis(0));
            upstream.push(g);
        }
        for i in (0..upstream.len().saturating_sub(1)).rev() {
            let next = upstream[i + 1].clone();
            upstream[i] += &next;
        }

        let mut dpre = Array2::<f32>::zeros((b, l));
        let dense = fwd.nnz() as f64 > dense_cutoff * (b * l) as f64;
        if dense {
            for (&(lo, hi), g) in ranges.iter().zip(&upstream) {
                let wd = self.w_dec.slice(s![lo..hi, ..]);
                let df = matmul_t(g.view(), wd);
                let f = fwd.latents.slice(s![.., lo..hi]);
                let mut dw = grads.w_dec.slice_mut(s![lo..hi, ..]);
                general_mat_mul(1.0, &f.t(), g, 1.0, &mut dw);
                Zip::from(dpre.slice_mut(s![.., lo..hi]))
                    .and(&df)
                    .and(&f)
                    .for_each(|dp, &d, &fv| {
                        if fv != 0.0 {
                            *dp = d;
                        }
                    });
            }
        } else {
            for (row, act) in fwd.active.iter().enumerate() {
                for &(j, f) in act {
                    let j = j as usize;
                    let g = upstream[range_of(&ranges, j)].row(row);
                    let g = g.as_slice().unwrap();
                    dpre[[row, j]] = dot(g, self.w_dec.row(j).as_slice().unwrap());
                    axpy(f, g, grads.w_dec.row_mut(j).as_slice_mut().unwrap());
                }
            }
        }

        match &self.arch {
            Architecture::L1 => {
                let lam = cfg.sparsity_coeff;
                terms.sparsity = fwd.latents.sum() as f64 / b as f64;
                terms.sparsity_loss = lam as f64 * terms.sparsity;
                for (row, act) in fwd.active.iter().enumerate() {
                    for &(j, _) in act {
                        dpre[[row, j as usize]] += lam / bf;
                    }
                }
            }
            Architecture::JumpRelu { bandwidth } => {
                let lam = cfg.sparsity_coeff;
                let eps = *bandwidth;
                terms.sparsity = terms.l0;
                terms.sparsity_loss = lam as f64 * terms.l0;
                let theta = self.threshold.as_ref().unwrap();
                let dtheta = grads.threshold.as_mut().unwrap();
                let g = &upstream[0];
                for (row, p) in pre.outer_iter().enumerate() {
                    for (j, (&pv, &th)) in p.iter().zip(theta.iter()).enumerate() {
                        if (pv - th).abs() < eps / 2.0 {
                            let df = dot(
                                g.row(row).as_slice().unwrap(),
                                self.w_dec.row(j).as_slice().unwrap(),
                            );
                            dtheta[j] += df * (-th / eps) - lam / (bf * eps);
                        }
                    }
                }
            }
            _ => {}
        }

        if cfg.aux_coeff > 0.0 && self.arch.uses_topk_aux() {
            if let Some(dead) = dead {
                terms.num_dead = dead.iter().filter(|&&d| d).count();
                for (ri, &(lo, hi)) in ranges.iter().enumerate() {
                    let candidates: Vec<u32> = (lo..hi).filter(|&j| dead[j]).map(|j| j as u32).collect();
                    if candidates.is_empty() {
                        continue;
                    }
                    let residual = &x - recons[ri];
                    terms.aux += topk_aux_loss(
                        residual.view(),
                        pre.view(),
                        self.w_dec.view(),
                        &candidates,
                        cfg.k_aux,
                        cfg.aux_coeff,
                        Some((&mut dpre, &mut grads.w_dec)),
                    );
                }
            }
        }

        // encoder
        let xc = self.centered(x);
        let db_enc = dpre.sum_axis(Axis(0));
        let dw_enc = grads.w_enc.as_mut().unwrap();
        let nnz = dpre.iter().filter(|&&v| v != 0.0).count();
        if nnz as f64 > dense_cutoff * (b * l) as f64 {
            general_mat_mul(1.0, &dpre.t(), &xc, 1.0, dw_enc);
        } else {
            for (row, dp) in dpre.outer_iter().enumerate() {
                let xr = xc.row(row);
                let xr = xr.as_slice().unwrap();
                for (j, &v) in dp.iter().enumerate() {
                    if v != 0.0 {
                        axpy(v, xr, dw_enc.row_mut(j).as_slice_mut().unwrap());
                    }
                }
            }
        }
        let w_enc = self.w_enc.as_ref().unwrap();
        for (j, &v) in db_enc.iter().enumerate() {
            if v != 0.0 {
                axpy(-v, w_enc.row(j).as_slice().unwrap(), grads.b_dec.as_slice_mut().unwrap());
            }
        }
        grads.b_enc = Some(db_enc);
        terms.total = terms.recon_loss + terms.sparsity_loss + terms.aux;
        (terms, grads)
    }

    /// Backpropagate the reconstruction MSE through the pursuit recurrence
    /// `r ← r − (w·r) w` with the selections held fixed.
    fn mp_backward(&self, x: ArrayView2<f32>, fwd: &ForwardResult, trace: &MpTrace, grads: &mut SaeGrads) {
        let b = x.nrows();
        let scale = 2.0 / b as f32;
        let d = self.hidden_dim();
        let mut g = vec![0.0f32; d];
        for row in 0..b {
            for ((gi, &xi), &ri) in g.iter_mut().zip(x.row(row)).zip(fwd.recon.row(row)) {
                *gi = scale * (xi - ri);
            }
            for (t, &(j, _)) in trace.steps[row].iter().enumerate().rev() {
                let j = j as usize;
                let w = self.w_dec.row(j).to_slice().unwrap();
                let r_t = trace.residuals[t].row(row);
                let r_t = r_t.as_slice().unwrap();
                let wg = dot(w, &g);
                let wr = dot(w, r_t);
                let dw = grads.w_dec.row_mut(j).into_slice().unwrap();
                axpy(-wr, &g, dw);
                axpy(-wg, r_t, dw);
                axpy(-wg, w, &mut g);
            }
            axpy(-1.0, &g, grads.b_dec.as_slice_mut().unwrap());
        }
    }

    pub fn to_container(&self) -> Container {
        let meta = SaeMeta {
            arch: self.arch.clone(),
            width: self.width(),
            hidden_dim: self.hidden_dim(),
            inference_threshold: self.inference_threshold,
        };
        let mut c = Container::new(toml::to_string(&meta).expect("sae metadata serializes"));
        if let Some(w) = &self.w_enc {
            c.push_matrix("w_enc", w);
        }
        if let Some(b) = &self.b_enc {
            c.push_f32("b_enc", &[b.len()], b.to_vec());
        }
        c.push_matrix("w_dec", &self.w_dec);
        c.push_f32("b_dec", &[self.b_dec.len()], self.b_dec.to_vec());
        if let Some(t) = &self.threshold {
            c.push_f32("thresholds", &[t.len()], t.to_vec());
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta: SaeMeta =
            toml::from_str(&c.config).map_err(|e| config_err(format!("stored SAE metadata: {e}")))?;
        meta.arch.validate(meta.width)?;
        let opt = |name: &str| c.has(name).then(|| c.matrix(name)).transpose();
        let sae = Self {
            w_enc: opt("w_enc")?,
            b_enc: c.has("b_enc").then(|| c.array1("b_enc")).transpose()?,
            w_dec: c.matrix("w_dec")?,
            b_dec: c.array1("b_dec")?,
            threshold: c.has("thresholds").then(|| c.array1("thresholds")).transpose()?,
            arch: meta.arch,
            inference_threshold: meta.inference_threshold,
        };
        if sae.w_dec.dim() != (meta.width, meta.hidden_dim) || sae.b_dec.len() != meta.hidden_dim {
            return Err(Error::Shape("SAE arrays disagree with stored metadata".into()));
        }
        if sae.arch.has_encoder() != sae.w_enc.is_some() {
            return Err(Error::Shape("encoder presence does not match architecture".into()));
        }
        Ok(sae)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SaeMeta {
    arch: Architecture,
    width: usize,
    hidden_dim: usize,
    #[serde(default)]
    inference_threshold: Option<f32>,
}

fn range_of(ranges: &[(usize, usize)], j: usize) -> usize {
    ranges.iter().position(|&(lo, hi)| j >= lo && j < hi).expect("latent in some range")
}

pub fn active_lists(latents: ArrayView2<f32>) -> Vec<Vec<(u32, f32)>> {
    latents
        .outer_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .filter(|(_, &v)| v != 0.0)
                .map(|(j, &v)| (j as u32, v))
                .collect()
        })
        .collect()
}

/// `(1/B) Σ_b ‖x_b − y_b‖²`, accumulated in f64.
pub fn mse(x: ArrayView2<f32>, y: ArrayView2<f32>) -> f64 {
    let b = x.nrows().max(1);
    Zip::from(&x)
        .and(&y)
        .fold(0.0f64, |acc, &a, &c| acc + ((a - c) as f64).powi(2))
        / b as f64
}

/// Sum of per-prefix reconstruction errors.
pub fn matryoshka_loss(prefix_recons: &[Array2<f32>], target: ArrayView2<f32>) -> f64 {
    prefix_recons.iter().map(|r| mse(target, r.view())).sum()
}

/// Keep the `k_total` largest positive entries of the whole batch, ties
/// broken by lower flat index. Returns the kept matrix and the smallest
/// kept value.
pub fn batch_topk(pre: ArrayView2<f32>, k_total: usize) -> (Array2<f32>, Option<f32>) {
    let l = pre.ncols();
    let flat: Vec<f32> = pre.iter().copied().collect();
    let mut cand: Vec<u32> = (0..flat.len() as u32).filter(|&i| flat[i as usize] > 0.0).collect();
    let by_rank = |a: &u32, b: &u32| {
        flat[*b as usize]
            .partial_cmp(&flat[*a as usize])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(b))
    };
    if cand.len() > k_total {
        if k_total == 0 {
            cand.clear();
        } else {
            cand.select_nth_unstable_by(k_total - 1, by_rank);
            cand.truncate(k_total);
        }
    }
    let mut out = Array2::<f32>::zeros(pre.dim());
    let mut cutoff = None::<f32>;
    for &i in &cand {
        let (r, c) = (i as usize / l, i as usize % l);
        let v = flat[i as usize];
        out[[r, c]] = v;
        cutoff = Some(cutoff.map_or(v, |m| m.min(v)));
    }
    (out, cutoff)
}

/// Dead latents (`candidates`) reconstruct the detached `residual` with
/// their top-`k_aux` rectified pre-activations per sample; the squared
/// error is scaled by `min(|candidates| / k_aux, 1)` and `coeff`.
/// Gradients, when requested, are added into `(d_pre, d_w_dec)`.
pub fn topk_aux_loss(
    residual: ArrayView2<f32>,
    pre: ArrayView2<f32>,
    w_dec: ArrayView2<f32>,
    candidates: &[u32],
    k_aux: usize,
    coeff: f32,
    mut grads: Option<(&mut Array2<f32>, &mut Array2<f32>)>,
) -> f64 {
    if candidates.is_empty() || k_aux == 0 {
        return 0.0;
    }
    let b = residual.nrows();
    let scale = (candidates.len() as f32 / k_aux as f32).min(1.0);
    let take = k_aux.min(candidates.len());
    let d = residual.ncols();
    let mut total = 0.0f64;
    let mut sel: Vec<u32> = Vec::with_capacity(candidates.len());
    let mut recon = vec![0.0f32; d];
    for row in 0..b {
        let p = pre.row(row);
        sel.clear();
        sel.extend(candidates.iter().copied().filter(|&j| p[j as usize] > 0.0));
        if sel.len() > take {
            sel.select_nth_unstable_by(take - 1, |a, c| {
                p[*c as usize]
                    .partial_cmp(&p[*a as usize])
                    .unwrap_or(Ordering::Equal)
                    .then(a.cmp(c))
            });
            sel.truncate(take);
        }
        recon.fill(0.0);
        for &j in &sel {
            axpy(p[j as usize], w_dec.row(j as usize).to_slice().unwrap(), &mut recon);
        }
        let e = residual.row(row);
        for (rv, &ev) in recon.iter_mut().zip(e.iter()) {
            *rv -= ev;
        }
        total += recon.iter().map(|&v| v as f64 * v as f64).sum::<f64>();
        if let Some((d_pre, d_w_dec)) = grads.as_mut() {
            let g = 2.0 * coeff * scale / b as f32;
            for &j in &sel {
                let j = j as usize;
                let w = w_dec.row(j);
                d_pre[[row, j]] += g * dot(&recon, w.to_slice().unwrap());
                axpy(g * p[j], &recon, d_w_dec.row_mut(j).into_slice().unwrap());
            }
        }
    }
    coeff as f64 * scale as f64 * total / b as f64
}

/// Explicit per-prefix form of the matryoshka auxiliary loss: latents in
/// each range `[m_prev, m)` that are dead reconstruct `target − recon_m`.
pub fn matryoshka_aux_loss(
    target: ArrayView2<f32>,
    prefix_recons: &[Array2<f32>],
    prefixes: &[usize],
    dead: &[bool],
    pre: ArrayView2<f32>,
    w_dec: ArrayView2<f32>,
    k_aux: usize,
    coeff: f32,
) -> f64 {
    let mut start = 0;
    let mut total = 0.0;
    for (&m, recon) in prefixes.iter().zip(prefix_recons) {
        let cand: Vec<u32> = (start..m).filter(|&j| dead[j]).map(|j| j as u32).collect();
        let residual = &target - recon;
        total += topk_aux_loss(residual.view(), pre, w_dec, &cand, k_aux, coeff, None);
        start = m;
    }
    total
}

/// `θ`-derivative of the batch-mean L0 under the rectangle straight-through
/// estimator: `-(1/ε) · (1/B) Σ_b 1[|pre_bj − θ_j| < ε/2]`.
pub fn jumprelu_l0_threshold_grad(pre: ArrayView2<f32>, theta: ArrayView1<f32>, bandwidth: f32) -> Array1<f32> {
    let b = pre.nrows() as f32;
    let mut g = Array1::<f32>::zeros(theta.len());
    for row in pre.outer_iter() {
        for ((gj, &p), &t) in g.iter_mut().zip(row.iter()).zip(theta.iter()) {
            if (p - t).abs() < bandwidth / 2.0 {
                *gj -= 1.0 / (bandwidth * b);
            }
        }
    }
    g
}
