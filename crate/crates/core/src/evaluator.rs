//! Ground-truth evaluation of a trained SAE against the synthetic model
//! that generated its data, plus a supervised logistic-probe baseline.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::generator::{SparseCoefficients, SyntheticModel};
use crate::linalg::matmul_t;
use crate::rng::{self, domain};
use crate::sae::SaeModel;
use crate::trainer::{Adam, AdamConfig};

/// Streaming `1 − E‖a − â‖² / Var(a)` with `Var(a) = E‖a‖² − ‖E a‖²`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VarianceAccumulator {
    n: u64,
    sum: Vec<f64>,
    sum_sq: f64,
    sse: f64,
}

impl VarianceAccumulator {
    pub fn add(&mut self, a: ArrayView2<f32>, recon: ArrayView2<f32>) {
        if self.sum.is_empty() {
            self.sum = vec![0.0; a.ncols()];
        }
        for (row, rrow) in a.outer_iter().zip(recon.outer_iter()) {
            for ((s, &x), &y) in self.sum.iter_mut().zip(row.iter()).zip(rrow.iter()) {
                *s += x as f64;
                self.sum_sq += (x as f64).powi(2);
                self.sse += (x as f64 - y as f64).powi(2);
            }
        }
        self.n += a.nrows() as u64;
    }

    pub fn merge(&mut self, other: &Self) {
        if self.sum.is_empty() {
            self.sum = vec![0.0; other.sum.len()];
        }
        self.n += other.n;
        self.sum_sq += other.sum_sq;
        self.sse += other.sse;
        self.sum.iter_mut().zip(&other.sum).for_each(|(a, b)| *a += b);
    }

    pub fn explained_variance(&self) -> Result<f64> {
        if self.n < 2 {
            return Err(Error::Undefined("explained variance needs at least 2 samples".into()));
        }
        let n = self.n as f64;
        let mean_sq: f64 = self.sum.iter().map(|s| (s / n).powi(2)).sum();
        let var = self.sum_sq / n - mean_sq;
        if !(var > 1e-12 * (self.sum_sq / n).max(f64::MIN_POSITIVE)) {
            return Err(Error::Undefined("explained variance of a zero-variance input".into()));
        }
        Ok(1.0 - (self.sse / n) / var)
    }
}

pub fn explained_variance(a: ArrayView2<f32>, recon: ArrayView2<f32>) -> Result<f64> {
    if a.dim() != recon.dim() {
        return Err(Error::Shape("activations and reconstructions differ in shape".into()));
    }
    let mut acc = VarianceAccumulator::default();
    acc.add(a, recon);
    acc.explained_variance()
}

/// `|cos|` between every row of `a` and every row of `b`.
pub fn abs_cosine(a: ArrayView2<f32>, b: ArrayView2<f32>) -> Result<Array2<f32>> {
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!(
            "decoder dimension {} differs from dictionary dimension {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let unit = |m: ArrayView2<f32>| {
        let mut m = m.to_owned();
        for mut row in m.outer_iter_mut() {
            let n = row.dot(&row).sqrt();
            if n > 0.0 {
                row /= n;
            }
        }
        m
    };
    let mut s = matmul_t(unit(a).view(), unit(b).view());
    s.mapv_inplace(f32::abs);
    Ok(s)
}

/// Minimum-cost assignment of every row to a distinct column
/// (`rows <= cols`), shortest augmenting paths with potentials.
pub fn hungarian(cost: ArrayView2<f64>) -> Vec<usize> {
    let (n, m) = cost.dim();
    assert!(n <= m, "hungarian expects rows <= cols");
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    let mut minv = vec![inf; m + 1];
    let mut used = vec![false; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        minv.fill(inf);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            let row = cost.row(i0 - 1);
            for j in 1..=m {
                if !used[j] {
                    let cur = row[j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assignment {
    Exact,
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MccResult {
    pub mcc: f64,
    pub mode: Assignment,
    /// `(latent, feature, |cos|)`
    pub matching: Vec<(usize, usize, f32)>,
}

#[derive(Clone, Copy, PartialEq)]
struct Cand {
    sim: f32,
    row: usize,
}

impl Eq for Cand {}

impl Ord for Cand {
    fn cmp(&self, o: &Self) -> Ordering {
        self.sim.total_cmp(&o.sim).then(o.row.cmp(&self.row))
    }
}

impl PartialOrd for Cand {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

/// Repeatedly take the largest remaining entry whose row and column are
/// both free. Ties go to the lower row, then the lower column.
pub fn greedy_assignment(sim: ArrayView2<f32>) -> Vec<(usize, usize)> {
    let (n, m) = sim.dim();
    let mut col_used = vec![false; m];
    let best_free = |r: usize, used: &[bool]| -> Option<(usize, f32)> {
        let mut best: Option<(usize, f32)> = None;
        for (c, &s) in sim.row(r).iter().enumerate() {
            if !used[c] && best.is_none_or(|(_, b)| s > b) {
                best = Some((c, s));
            }
        }
        best
    };
    let mut choice: Vec<Option<usize>> = vec![None; n];
    let mut heap = BinaryHeap::with_capacity(n);
    for r in 0..n {
        if let Some((c, s)) = best_free(r, &col_used) {
            choice[r] = Some(c);
            heap.push(Cand { sim: s, row: r });
        }
    }
    let mut out = Vec::with_capacity(n.min(m));
    while let Some(Cand { row, .. }) = heap.pop() {
        let c = choice[row].expect("queued rows have a candidate");
        if !col_used[c] {
            col_used[c] = true;
            out.push((row, c));
            if out.len() == n.min(m) {
                break;
            }
        } else if let Some((c, s)) = best_free(row, &col_used) {
            choice[row] = Some(c);
            heap.push(Cand { sim: s, row });
        }
    }
    out.sort_unstable();
    out
}

/// Default ceiling on `latents × features` for the exact assignment.
pub const DEFAULT_MAX_EXACT_CELLS: usize = 1 << 24;

/// Mean `|cos|` over a one-to-one matching of decoder rows to dictionary
/// features.
pub fn mcc(
    decoder: ArrayView2<f32>,
    dictionary: ArrayView2<f32>,
    mode: Assignment,
    max_exact_cells: usize,
) -> Result<MccResult> {
    let sim = abs_cosine(decoder, dictionary)?;
    mcc_from_similarity(sim.view(), mode, max_exact_cells)
}

pub fn mcc_from_similarity(sim: ArrayView2<f32>, mode: Assignment, max_exact_cells: usize) -> Result<MccResult> {
    let (l, n) = sim.dim();
    if l == 0 || n == 0 {
        return Err(Error::Undefined("matching over an empty side".into()));
    }
    let pairs: Vec<(usize, usize)> = match mode {
        Assignment::Greedy => greedy_assignment(sim),
        Assignment::Exact => {
            if l * n > max_exact_cells {
                return Err(config_err(format!(
                    "exact assignment over {l}×{n} exceeds the limit of {max_exact_cells} cells; use greedy matching"
                )));
            }
            if l <= n {
                let cost = sim.mapv(|s| -(s as f64));
                hungarian(cost.view()).into_iter().enumerate().collect()
            } else {
                let cost = sim.t().mapv(|s| -(s as f64));
                let mut p: Vec<(usize, usize)> =
                    hungarian(cost.view()).into_iter().enumerate().map(|(f, j)| (j, f)).collect();
                p.sort_unstable();
                p
            }
        }
    };
    let matching: Vec<(usize, usize, f32)> = pairs.iter().map(|&(j, i)| (j, i, sim[[j, i]])).collect();
    let total: f64 = matching.iter().map(|m| m.2 as f64).sum();
    Ok(MccResult {
        mcc: total / l.min(n) as f64,
        mode,
        matching,
    })
}

/// Best-matching feature per latent by `|cos|`, lowest index on ties.
pub fn best_matches(sim: ArrayView2<f32>) -> Vec<usize> {
    sim.outer_iter()
        .map(|row| crate::linalg::argmax(row.as_slice().expect("contiguous")))
        .collect()
}

/// Distinct best matches divided by the number of latents.
pub fn uniqueness(decoder: ArrayView2<f32>, dictionary: ArrayView2<f32>) -> Result<f64> {
    let sim = abs_cosine(decoder, dictionary)?;
    Ok(uniqueness_from_matches(&best_matches(sim.view())))
}

pub fn uniqueness_from_matches(matches: &[usize]) -> f64 {
    let mut m = matches.to_vec();
    m.sort_unstable();
    m.dedup();
    m.len() as f64 / matches.len().max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision is 0 when nothing is predicted; recall is undefined (None)
/// when there are no positives.
pub fn binary_metrics(tp: u64, predicted: u64, positives: u64) -> Option<BinaryMetrics> {
    if positives == 0 {
        return None;
    }
    let precision = if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 };
    let recall = tp as f64 / positives as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Some(BinaryMetrics { precision, recall, f1 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentMetrics {
    pub latent: usize,
    pub feature: usize,
    pub cos: f32,
    pub fires: u64,
    pub feature_fires: u64,
    pub true_positives: u64,
    /// None when the matched feature never fires in the eval set.
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_samples: usize,
    pub batch_size: usize,
    pub assignment: Assignment,
    pub max_exact_cells: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_samples: 100_000,
            batch_size: 1024,
            assignment: Assignment::Exact,
            max_exact_cells: DEFAULT_MAX_EXACT_CELLS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub explained_variance: f64,
    pub mcc: f64,
    pub assignment: Assignment,
    pub uniqueness: f64,
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub mean_f1: f64,
    /// Latents excluded from the means because their feature never fired.
    pub undefined_latents: usize,
    pub l0_sae: f64,
    pub l0_ground_truth: f64,
    pub dead_latents: usize,
    pub n_eval_samples: usize,
    pub per_latent: Vec<LatentMetrics>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record([
            "latent", "feature", "cos", "fires", "feature_fires", "true_positives", "precision", "recall", "f1",
        ])
        .map_err(csv_err)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.per_latent {
            w.write_record([
                r.latent.to_string(),
                r.feature.to_string(),
                r.cos.to_string(),
                r.fires.to_string(),
                r.feature_fires.to_string(),
                r.true_positives.to_string(),
                opt(r.precision),
                opt(r.recall),
                opt(r.f1),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

/// Per-batch statistics, merged in batch order.
#[derive(Debug, Clone, Default)]
struct BatchStats {
    var: VarianceAccumulator,
    latent_fires: Vec<u64>,
    feature_fires: Vec<u64>,
    tp: Vec<u64>,
    sae_active: u64,
    gt_active: u64,
}

impl BatchStats {
    fn merge(&mut self, o: &BatchStats) {
        self.var.merge(&o.var);
        if self.latent_fires.is_empty() {
            self.latent_fires = vec![0; o.latent_fires.len()];
            self.feature_fires = vec![0; o.feature_fires.len()];
            self.tp = vec![0; o.tp.len()];
        }
        add_into(&mut self.latent_fires, &o.latent_fires);
        add_into(&mut self.feature_fires, &o.feature_fires);
        add_into(&mut self.tp, &o.tp);
        self.sae_active += o.sae_active;
        self.gt_active += o.gt_active;
    }
}

fn add_into(a: &mut [u64], b: &[u64]) {
    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
}

fn batch_stats(
    sae: &SaeModel,
    acts: ArrayView2<f32>,
    coeffs: &SparseCoefficients,
    matches: &[usize],
    n_features: usize,
) -> Result<BatchStats> {
    let fwd = sae.forward(acts)?;
    let mut s = BatchStats {
        latent_fires: vec![0; sae.width()],
        feature_fires: vec![0; n_features],
        tp: vec![0; sae.width()],
        ..Default::default()
    };
    s.var.add(acts, fwd.recon.view());
    let mut fired = vec![false; n_features];
    for (row, active) in fwd.active.iter().enumerate() {
        let (cols, _) = coeffs.row(row);
        for &i in cols {
            fired[i as usize] = true;
            s.feature_fires[i as usize] += 1;
        }
        s.gt_active += cols.len() as u64;
        for &(j, v) in active {
            if v > 0.0 {
                let j = j as usize;
                s.latent_fires[j] += 1;
                s.sae_active += 1;
                if fired[matches[j]] {
                    s.tp[j] += 1;
                }
            }
        }
        for &i in cols {
            fired[i as usize] = false;
        }
    }
    Ok(s)
}

/// Full evaluation on fresh samples from the eval stream of `seed`.
pub fn evaluate(sae: &SaeModel, model: &SyntheticModel, cfg: &EvalConfig, seed: u64) -> Result<EvalReport> {
    if cfg.n_samples == 0 || cfg.batch_size == 0 {
        return Err(config_err("evaluation needs n_samples >= 1 and batch_size >= 1"));
    }
    if sae.hidden_dim() != model.hidden_dim() {
        return Err(Error::Shape(format!(
            "SAE dimension {} differs from model dimension {}",
            sae.hidden_dim(),
            model.hidden_dim()
        )));
    }
    let dictionary = model.dictionary.directions();
    let sim = abs_cosine(sae.w_dec.view(), dictionary.view())?;
    let matches = best_matches(sim.view());
    let mut mode = cfg.assignment;
    if mode == Assignment::Exact && sae.width() * model.n_features() > cfg.max_exact_cells {
        mode = Assignment::Greedy;
    }
    let matched = mcc_from_similarity(sim.view(), mode, cfg.max_exact_cells)?;

    let data_seed = rng::stream_key(seed, &[domain::EVAL_DATA]);
    let n_batches = cfg.n_samples.div_ceil(cfg.batch_size);
    let n_features = model.n_features();
    let group = rayon::current_num_threads().max(1) * 2;
    let mut total = BatchStats::default();
    for start in (0..n_batches).step_by(group) {
        let end = (start + group).min(n_batches);
        let parts: Vec<Result<BatchStats>> = (start..end)
            .into_par_iter()
            .map(|b| {
                let size = cfg.batch_size.min(cfg.n_samples - b * cfg.batch_size);
                let batch = model.sample_batch(size, b as u64, data_seed, true);
                let coeffs = batch.coefficients.as_ref().expect("ground truth requested");
                batch_stats(sae, batch.activations.view(), coeffs, &matches, n_features)
            })
            .collect();
        for p in parts {
            total.merge(&p?);
        }
    }

    let per_latent: Vec<LatentMetrics> = (0..sae.width())
        .map(|j| {
            let i = matches[j];
            let m = binary_metrics(total.tp[j], total.latent_fires[j], total.feature_fires[i]);
            LatentMetrics {
                latent: j,
                feature: i,
                cos: sim[[j, i]],
                fires: total.latent_fires[j],
                feature_fires: total.feature_fires[i],
                true_positives: total.tp[j],
                precision: m.map(|m| m.precision),
                recall: m.map(|m| m.recall),
                f1: m.map(|m| m.f1),
            }
        })
        .collect();
    let defined: Vec<&LatentMetrics> = per_latent.iter().filter(|m| m.f1.is_some()).collect();
    let mean = |f: fn(&LatentMetrics) -> f64| {
        if defined.is_empty() {
            0.0
        } else {
            defined.iter().map(|m| f(m)).sum::<f64>() / defined.len() as f64
        }
    };
    let n = cfg.n_samples as f64;
    Ok(EvalReport {
        explained_variance: total.var.explained_variance()?,
        mcc: matched.mcc,
        assignment: matched.mode,
        uniqueness: uniqueness_from_matches(&matches),
        mean_precision: mean(|m| m.precision.unwrap()),
        mean_recall: mean(|m| m.recall.unwrap()),
        mean_f1: mean(|m| m.f1.unwrap()),
        undefined_latents: per_latent.len() - defined.len(),
        l0_sae: total.sae_active as f64 / n,
        l0_ground_truth: total.gt_active as f64 / n,
        dead_latents: total.latent_fires.iter().filter(|&&c| c == 0).count(),
        n_eval_samples: cfg.n_samples,
        per_latent,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub n_features: usize,
    pub n_samples: usize,
    pub lr: f32,
    pub steps: usize,
    pub batch_size: usize,
    pub weight_decay: f32,
    /// Fraction held out for testing.
    pub test_fraction: f64,
    /// Fraction of the training split used to tune thresholds.
    pub validation_fraction: f64,
    pub n_thresholds: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            n_features: 4096,
            n_samples: 2_000_000,
            lr: 3e-3,
            steps: 10_000,
            batch_size: 4096,
            weight_decay: 1e-3,
            test_fraction: 0.2,
            validation_fraction: 0.125,
            n_thresholds: 499,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeMetrics {
    pub feature: usize,
    pub threshold: f64,
    pub auc: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub mean_f1: f64,
    pub mean_auc: f64,
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub mean_accuracy: f64,
    pub per_feature: Vec<ProbeMetrics>,
    /// Probed features without a positive training or test example.
    pub excluded: Vec<usize>,
}

fn sigmoid(z: f32) -> f32 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Per-feature BCE with positives weighted by `neg/pos`, averaged over the
/// batch. Returns the loss and `dL/dz`.
pub fn weighted_bce(logits: ArrayView2<f32>, labels: ArrayView2<u8>, pos_weight: &[f32]) -> (f64, Array2<f32>) {
    let b = logits.nrows() as f32;
    let mut grad = Array2::<f32>::zeros(logits.dim());
    let mut loss = 0.0f64;
    for ((z, y), g) in logits.outer_iter().zip(labels.outer_iter()).zip(grad.outer_iter_mut()) {
        for (((&zi, &yi), gi), &w) in z.iter().zip(y.iter()).zip(g).zip(pos_weight) {
            let p = sigmoid(zi);
            let log_p = -softplus(-zi);
            let log_q = -softplus(zi);
            if yi != 0 {
                loss -= (w * log_p) as f64;
                *gi = w * (p - 1.0) / b;
            } else {
                loss -= log_q as f64;
                *gi = p / b;
            }
        }
    }
    (loss / b as f64, grad)
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Area under the ROC curve via the rank-sum statistic (ties averaged).
pub fn roc_auc(scores: &[f32], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0f64;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if labels[k] {
                rank_sum += avg;
            }
        }
        i = j + 1;
    }
    Some((rank_sum - (pos * (pos + 1)) as f64 / 2.0) / (pos as f64 * neg as f64))
}

/// Train one logistic probe per feature (the first `n_features`, the most
/// frequent under Zipfian ordering) directly on activations.
pub fn train_probes(model: &SyntheticModel, cfg: &ProbeConfig, seed: u64) -> Result<ProbeReport> {
    let f = cfg.n_features.min(model.n_features());
    if f == 0 || cfg.n_samples < 10 || cfg.batch_size == 0 || cfg.n_thresholds == 0 {
        return Err(config_err("probe config needs features, samples, batch size and thresholds"));
    }
    if !(0.0..1.0).contains(&cfg.test_fraction) || !(0.0..1.0).contains(&cfg.validation_fraction) {
        return Err(config_err("probe split fractions must lie in [0, 1)"));
    }
    let d = model.hidden_dim();
    let data_seed = rng::stream_key(seed, &[domain::PROBE]);
    let chunk = 8192;
    let mut x = Array2::<f32>::zeros((cfg.n_samples, d));
    let mut y = Array2::<u8>::zeros((cfg.n_samples, f));
    for (ci, start) in (0..cfg.n_samples).step_by(chunk).enumerate() {
        let size = chunk.min(cfg.n_samples - start);
        let batch = model.sample_batch(size, ci as u64, data_seed, true);
        x.slice_mut(ndarray::s![start..start + size, ..]).assign(&batch.activations);
        let coeffs = batch.coefficients.expect("ground truth requested");
        for r in 0..size {
            for &i in coeffs.row(r).0 {
                if (i as usize) < f {
                    y[[start + r, i as usize]] = 1;
                }
            }
        }
    }
    let n_test = ((cfg.n_samples as f64) * cfg.test_fraction).round() as usize;
    let n_train = cfg.n_samples - n_test;
    let n_val = ((n_train as f64) * cfg.validation_fraction).round() as usize;

    // standardize with training statistics
    let xt = x.slice(ndarray::s![..n_train, ..]);
    let mean = xt.mean_axis(Axis(0)).expect("non-empty");
    let std = xt.std_axis(Axis(0), 0.0).mapv(|s| if s > 0.0 { s } else { 1.0 });
    x -= &mean;
    x /= &std;

    let pos: Vec<u64> = (0..f).map(|i| y.slice(ndarray::s![..n_train, i]).iter().map(|&v| v as u64).sum()).collect();
    let pos_weight: Vec<f32> = pos
        .iter()
        .map(|&p| if p == 0 { 1.0 } else { (n_train as u64 - p) as f32 / p as f32 })
        .collect();

    let mut w = Array2::<f32>::zeros((f, d));
    let mut bias = Array1::<f32>::zeros(f);
    let mut adam = Adam::new(&[f * d, f], AdamConfig::default());
    let mut order = rng::stream(seed, &[domain::PROBE, 1]);
    let bs = cfg.batch_size.min(n_train);
    let mut xb = Array2::<f32>::zeros((bs, d));
    let mut yb = Array2::<u8>::zeros((bs, f));
    for step in 0..cfg.steps {
        for r in 0..bs {
            let k = rand::Rng::random_range(&mut order, 0..n_train);
            xb.row_mut(r).assign(&x.row(k));
            yb.row_mut(r).assign(&y.row(k));
        }
        let mut z = matmul_t(xb.view(), w.view());
        z += &bias;
        let (_, dz) = weighted_bce(z.view(), yb.view(), &pos_weight);
        let mut dw = dz.t().dot(&xb);
        dw.scaled_add(cfg.weight_decay, &w);
        let db = dz.sum_axis(Axis(0));
        let lr = cfg.lr * 0.5 * (1.0 + (std::f32::consts::PI * step as f32 / cfg.steps as f32).cos());
        adam.step(
            vec![w.as_slice_mut().unwrap(), bias.as_slice_mut().unwrap()],
            vec![dw.as_slice().unwrap(), db.as_slice().unwrap()],
            lr,
        )?;
    }

    let probs = |rows: std::ops::Range<usize>| {
        let mut z = matmul_t(x.slice(ndarray::s![rows, ..]), w.view());
        z += &bias;
        z.mapv_inplace(sigmoid);
        z
    };
    let val = probs(n_train - n_val..n_train);
    let test = probs(n_train..cfg.n_samples);
    let thresholds: Vec<f64> = (1..=cfg.n_thresholds).map(|t| t as f64 / (cfg.n_thresholds + 1) as f64).collect();
    let mut per_feature = Vec::new();
    let mut excluded = Vec::new();
    for i in 0..f {
        let yv: Vec<bool> = (n_train - n_val..n_train).map(|r| y[[r, i]] != 0).collect();
        let yt: Vec<bool> = (n_train..cfg.n_samples).map(|r| y[[r, i]] != 0).collect();
        if pos[i] == 0 || !yt.iter().any(|&v| v) || !yv.iter().any(|&v| v) {
            excluded.push(i);
            continue;
        }
        let sv = val.column(i);
        let f1_at = |t: f64, s: &[f32], lab: &[bool]| {
            let (mut tp, mut pred) = (0u64, 0u64);
            for (&p, &l) in s.iter().zip(lab) {
                if p as f64 >= t {
                    pred += 1;
                    tp += l as u64;
                }
            }
            binary_metrics(tp, pred, lab.iter().filter(|&&l| l).count() as u64).map_or(0.0, |m| m.f1)
        };
        let sv: Vec<f32> = sv.to_vec();
        let mut best = (f64::NEG_INFINITY, 0.5);
        for &t in &thresholds {
            let score = f1_at(t, &sv, &yv);
            if score > best.0 {
                best = (score, t);
            }
        }
        let st: Vec<f32> = test.column(i).to_vec();
        let threshold = best.1;
        let (mut tp, mut pred, mut correct) = (0u64, 0u64, 0u64);
        for (&p, &l) in st.iter().zip(&yt) {
            let hit = p as f64 >= threshold;
            pred += hit as u64;
            tp += (hit && l) as u64;
            correct += (hit == l) as u64;
        }
        let m = binary_metrics(tp, pred, yt.iter().filter(|&&l| l).count() as u64).expect("positives present");
        per_feature.push(ProbeMetrics {
            feature: i,
            threshold,
            auc: roc_auc(&st, &yt).unwrap_or(f64::NAN),
            accuracy: correct as f64 / yt.len() as f64,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
        });
    }
    let mean = |g: fn(&ProbeMetrics) -> f64| {
        let v: Vec<f64> = per_feature.iter().map(g).filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok(ProbeReport {
        mean_f1: mean(|m| m.f1),
        mean_auc: mean(|m| m.auc),
        mean_precision: mean(|m| m.precision),
        mean_recall: mean(|m| m.recall),
        mean_accuracy: mean(|m| m.accuracy),
        per_feature,
        excluded,
    })
}

/// Spearman rank correlation (ties averaged).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&x, &y| v[x].total_cmp(&v[y]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            for &k in &idx[i..=j] {
                r[k] = (i + j) as f64 / 2.0;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn explained_variance_identities() {
        let a = array![[1.0f32, 2.0], [3.0, -1.0], [0.5, 0.0]];
        assert!((explained_variance(a.view(), a.view()).unwrap() - 1.0).abs() < 1e-12);
        let mean = a.mean_axis(Axis(0)).unwrap();
        let m = Array2::from_shape_fn(a.dim(), |(_, j)| mean[j]);
        assert!(explained_variance(a.view(), m.view()).unwrap().abs() < 1e-6);
        assert!(explained_variance(m.view(), m.view()).is_err());
    }

    #[test]
    fn explained_variance_hand_case() {
        // a = (1,0),(0,1),(1,1); â = (1,0),(0,0),(1,1)
        // E‖a‖² = (1+1+2)/3, E a = (2/3, 2/3) → Var = 4/3 − 8/9 = 4/9
        // E‖a − â‖² = 1/3 → R² = 1 − (1/3)/(4/9) = 1/4
        let a = array![[1.0f32, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let r = array![[1.0f32, 0.0], [0.0, 0.0], [1.0, 1.0]];
        assert!((explained_variance(a.view(), r.view()).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn permutation_decoder_is_perfect() {
        let dict = array![[1.0f32, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let dec = array![[0.0f32, 0.0, -2.0], [0.5, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let r = mcc(dec.view(), dict.view(), Assignment::Exact, 100).unwrap();
        assert!((r.mcc - 1.0).abs() < 1e-6);
        let perm: Vec<usize> = r.matching.iter().map(|m| m.1).collect();
        assert_eq!(perm, vec![2, 0, 1]);
        assert!((uniqueness(dec.view(), dict.view()).unwrap() - 1.0).abs() < 1e-12);
        assert!(mcc(dec.view(), dict.view(), Assignment::Exact, 8).is_err());
    }

    #[test]
    fn uniqueness_cases() {
        assert_eq!(uniqueness_from_matches(&[0, 0, 1, 2]), 0.75);
        let dict = array![[1.0f32, 0.0], [0.0, 1.0]];
        let dec = array![[1.0f32, 0.2], [1.0, 0.2], [1.0, 0.2]];
        assert!((uniqueness(dec.view(), dict.view()).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn confusion_arithmetic() {
        let m = binary_metrics(3, 4, 5).unwrap();
        assert_eq!(m.precision, 0.75);
        assert_eq!(m.recall, 0.6);
        assert!((m.f1 - 0.9 / 1.35).abs() < 1e-12);
        let dead = binary_metrics(0, 0, 7).unwrap();
        assert_eq!((dead.precision, dead.recall, dead.f1), (0.0, 0.0, 0.0));
        assert!(binary_metrics(0, 3, 0).is_none());
    }

    fn brute_force_max(sim: &Array2<f32>) -> f64 {
        fn rec(sim: &Array2<f32>, row: usize, used: &mut Vec<bool>) -> f64 {
            if row == sim.nrows() {
                return 0.0;
            }
            let mut best = f64::NEG_INFINITY;
            for c in 0..sim.ncols() {
                if !used[c] {
                    used[c] = true;
                    best = best.max(sim[[row, c]] as f64 + rec(sim, row + 1, used));
                    used[c] = false;
                }
            }
            best
        }
        let s = if sim.nrows() <= sim.ncols() { sim.clone() } else { sim.t().to_owned() };
        rec(&s, 0, &mut vec![false; s.ncols()])
    }

    proptest! {
        #[test]
        fn hungarian_matches_brute_force(
            rows in 1usize..6, cols in 1usize..6,
            vals in proptest::collection::vec(0u8..9, 36),
        ) {
            let sim = Array2::from_shape_fn((rows, cols), |(i, j)| (vals[i * 6 + j] + 1) as f32 / 10.0);
            let r = mcc_from_similarity(sim.view(), Assignment::Exact, 1000).unwrap();
            let best = brute_force_max(&sim) / rows.min(cols) as f64;
            prop_assert!((r.mcc - best).abs() < 1e-6);
            let g = mcc_from_similarity(sim.view(), Assignment::Greedy, 0).unwrap();
            prop_assert!(g.mcc <= r.mcc + 1e-9);
            let mut cols_seen: Vec<usize> = r.matching.iter().map(|m| m.1).collect();
            cols_seen.sort_unstable();
            cols_seen.dedup();
            prop_assert_eq!(cols_seen.len(), rows.min(cols));
        }

        #[test]
        fn explained_variance_shift_invariant(shift in -50.0f32..50.0) {
            let a = array![[1.0f32, 2.0], [3.0, -1.0], [0.5, 0.0], [2.0, 2.0]];
            let r = array![[1.1f32, 1.8], [2.5, -1.0], [0.4, 0.3], [2.0, 1.5]];
            let base = explained_variance(a.view(), r.view()).unwrap();
            let moved = explained_variance((&a + shift).view(), (&r + shift).view()).unwrap();
            prop_assert!((base - moved).abs() < 1e-3);
        }
    }

    #[test]
    fn greedy_is_exact_on_diagonal_dominant() {
        let sim = array![[0.9f32, 0.1, 0.2], [0.05, 0.8, 0.1], [0.2, 0.1, 0.7], [0.3, 0.2, 0.1]];
        let e = mcc_from_similarity(sim.view(), Assignment::Exact, 100).unwrap();
        let g = mcc_from_similarity(sim.view(), Assignment::Greedy, 0).unwrap();
        assert_eq!(e.matching, g.matching);
        assert!((e.mcc - 0.8).abs() < 1e-6);
    }

    #[test]
    fn balanced_weighting_is_plain_bce() {
        let z = array![[0.3f32, -1.2], [2.0, 0.1]];
        let y = array![[1u8, 0], [0, 1]];
        let (loss, grad) = weighted_bce(z.view(), y.view(), &[1.0, 1.0]);
        let mut plain = 0.0f64;
        for ((&zi, &yi), &gi) in z.iter().zip(y.iter()).zip(grad.iter()) {
            let p = 1.0 / (1.0 + (-(zi as f64)).exp());
            plain -= if yi == 1 { p.ln() } else { (1.0 - p).ln() };
            assert!((gi as f64 - (p - yi as f64) / 2.0).abs() < 1e-6);
        }
        assert!((loss - plain / 2.0).abs() < 1e-5);
        let (big, _) = weighted_bce(array![[-200.0f32]].view(), array![[1u8]].view(), &[1.0]);
        assert!(big.is_finite() && big > 100.0);
    }

    #[test]
    fn auc_and_spearman() {
        assert_eq!(roc_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]), Some(0.75));
        assert_eq!(roc_auc(&[0.1, 0.2], &[true, true]), None);
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 9.0, 3.0, 1.0]) + 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[0.1, 0.5, 0.7]) - 1.0).abs() < 1e-12);
    }
}
