//! SAE training: Adam, the learning-rate schedule, the L0 autotuning
//! controller, dead-latent tracking and the training loop.

use std::sync::mpsc;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::generator::SyntheticModel;
use crate::rng::{self, domain};
use crate::sae::{Architecture, LossConfig, LossTerms, SaeConfig, SaeModel};

/// Anything that can produce training batches by index. Batch `i` must
/// depend only on `(size, i)` so runs are reproducible.
pub trait BatchSource: Sync {
    fn hidden_dim(&self) -> usize;
    fn batch(&self, size: usize, index: u64) -> Array2<f32>;
}

/// A synthetic model sampled on the fly under a fixed data seed.
pub struct ModelStream<'a> {
    pub model: &'a SyntheticModel,
    pub seed: u64,
}

impl<'a> ModelStream<'a> {
    /// Training stream for a run seed.
    pub fn training(model: &'a SyntheticModel, seed: u64) -> Self {
        Self {
            model,
            seed: rng::stream_key(seed, &[domain::TRAIN_DATA]),
        }
    }
}

impl BatchSource for ModelStream<'_> {
    fn hidden_dim(&self) -> usize {
        self.model.hidden_dim()
    }

    fn batch(&self, size: usize, index: u64) -> Array2<f32> {
        self.model.sample_batch(size, index, self.seed, false).activations
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

impl Adam {
    pub fn new(sizes: &[usize], cfg: AdamConfig) -> Self {
        Self {
            cfg,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// One bias-corrected Adam update. Nothing is modified if any gradient
    /// is non-finite.
    pub fn step(&mut self, params: Vec<&mut [f32]>, grads: Vec<&[f32]>, lr: f32) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape("parameter groups do not match optimizer state".into()));
        }
        for (i, (p, g)) in params.iter().zip(&grads).enumerate() {
            if p.len() != g.len() || p.len() != self.m[i].len() {
                return Err(Error::Shape(format!("parameter group {i} size mismatch")));
            }
            if let Some(k) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient group {i} entry {k} is {} at optimizer step {}",
                    g[k],
                    self.t + 1
                )));
            }
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((pi, &gi), mi), vi) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                *pi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Constant for the first two thirds of training, then linear to zero.
pub fn lr_schedule(step: usize, total_steps: usize, base_lr: f32) -> f32 {
    if total_steps == 0 {
        return base_lr;
    }
    let t = total_steps as f64;
    let decay_start = 2.0 * t / 3.0;
    let s = step as f64;
    if s < decay_start {
        base_lr
    } else {
        (base_lr as f64 * ((t - s) / (t - decay_start)).max(0.0)) as f32
    }
}

/// Sparsity coefficient with a linear warmup over `warmup_steps`.
pub fn effective_coeff(base: f32, step: usize, warmup_steps: usize, multiplier: f64) -> f32 {
    let ramp = if step < warmup_steps {
        step as f64 / warmup_steps as f64
    } else {
        1.0
    };
    (base as f64 * ramp * multiplier) as f32
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutotunerConfig {
    pub alpha: f64,
    pub alpha_rate: f64,
    pub integral_gain: f64,
    pub gain_scale: f64,
    pub converge_gain: f64,
    pub min_multiplier: f64,
    pub max_multiplier: f64,
}

impl Default for AutotunerConfig {
    fn default() -> Self {
        Self {
            alpha: 0.99,
            alpha_rate: 0.95,
            integral_gain: 3e-4,
            gain_scale: 10.0,
            converge_gain: 0.01,
            min_multiplier: 0.01,
            max_multiplier: 100.0,
        }
    }
}

/// Rate-damped integral controller on a multiplicative sparsity
/// multiplier.
#[derive(Debug, Clone, PartialEq)]
pub struct Autotuner {
    pub cfg: AutotunerConfig,
    pub target: f64,
    pub multiplier: f64,
    /// Smoothed L0; seeded with the first measurement.
    pub ema_l0: Option<f64>,
    pub ema_rate: f64,
}

impl Autotuner {
    pub fn new(target: f64, cfg: AutotunerConfig) -> Result<Self> {
        if !(target > 0.0) {
            return Err(config_err(format!("target L0 must be > 0, got {target}")));
        }
        Ok(Self {
            cfg,
            target,
            multiplier: 1.0,
            ema_l0: None,
            ema_rate: 0.0,
        })
    }

    /// Feed one batch L0 and return the multiplier for the next batch.
    pub fn step(&mut self, l0: f64) -> f64 {
        let c = self.cfg;
        let prev = self.ema_l0.unwrap_or(l0);
        let ema = c.alpha * prev + (1.0 - c.alpha) * l0;
        self.ema_rate = c.alpha_rate * self.ema_rate + (1.0 - c.alpha_rate) * (ema - prev);
        self.ema_l0 = Some(ema);
        let err = ema - self.target;
        let gain = if err * self.ema_rate < 0.0 { c.converge_gain } else { 1.0 };
        let delta = c.integral_gain * gain * ((err / self.target).abs() * c.gain_scale).tanh();
        if err > 0.0 {
            self.multiplier *= 1.0 + delta;
        } else if err < 0.0 {
            self.multiplier *= 1.0 - delta;
        }
        self.multiplier = self.multiplier.clamp(c.min_multiplier, c.max_multiplier);
        self.multiplier
    }
}

/// A latent is dead once `window` consecutive batches pass without it
/// firing.
#[derive(Debug, Clone, PartialEq)]
pub struct DeadLatentTracker {
    last_fired: Vec<u64>,
    batches: u64,
    window: u64,
}

impl DeadLatentTracker {
    pub fn new(width: usize, window: u64) -> Self {
        Self {
            last_fired: vec![0; width],
            batches: 0,
            window,
        }
    }

    pub fn observe(&mut self, active: &[Vec<(u32, f32)>]) {
        self.batches += 1;
        for row in active {
            for &(j, _) in row {
                self.last_fired[j as usize] = self.batches;
            }
        }
    }

    pub fn is_dead(&self, j: usize) -> bool {
        self.batches - self.last_fired[j] >= self.window
    }

    pub fn dead_mask(&self) -> Vec<bool> {
        (0..self.last_fired.len()).map(|j| self.is_dead(j)).collect()
    }

    pub fn dead_count(&self) -> usize {
        (0..self.last_fired.len()).filter(|&j| self.is_dead(j)).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f32,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub total_samples: u64,
    /// Base sparsity coefficient; defaults per architecture.
    pub sparsity_coeff: Option<f32>,
    pub target_l0: Option<f64>,
    pub l1_warmup_fraction: f64,
    pub aux_coeff: f32,
    /// Defaults to half the input dimension.
    pub k_aux: Option<usize>,
    pub dead_window: u64,
    pub autotuner: AutotunerConfig,
    /// Samples used to estimate the initial decoder bias.
    pub b_dec_init_samples: usize,
    pub telemetry_interval: usize,
    pub checkpoint_interval: Option<usize>,
    /// Sample the next batch on a second thread while training.
    pub prefetch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            adam: AdamConfig::default(),
            batch_size: 1024,
            total_samples: 0,
            sparsity_coeff: None,
            target_l0: None,
            l1_warmup_fraction: 1.0 / 3.0,
            aux_coeff: 1.0 / 32.0,
            k_aux: None,
            dead_window: 1000,
            autotuner: AutotunerConfig::default(),
            b_dec_init_samples: 8192,
            telemetry_interval: 100,
            checkpoint_interval: None,
            prefetch: true,
        }
    }
}

pub const DEFAULT_L1_COEFF: f32 = 2.0;
pub const DEFAULT_JUMPRELU_COEFF: f32 = 0.15;

impl TrainConfig {
    pub fn validate(&self, arch: &Architecture) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(config_err(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(config_err("batch_size must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.l1_warmup_fraction) {
            return Err(config_err("l1_warmup_fraction must lie in [0, 1]"));
        }
        if self.target_l0.is_some() && !arch.has_sparsity_penalty() {
            return Err(config_err(format!(
                "target_l0 autotuning applies to l1 and jumprelu only, not {}",
                arch.name()
            )));
        }
        if let Some(t) = self.target_l0 {
            if !(t > 0.0) {
                return Err(config_err("target_l0 must be > 0"));
            }
        }
        if self.telemetry_interval == 0 {
            return Err(config_err("telemetry_interval must be >= 1"));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.total_samples / self.batch_size as u64) as usize
    }

    pub fn base_coeff(&self, arch: &Architecture) -> f32 {
        match arch {
            Architecture::L1 => self.sparsity_coeff.unwrap_or(DEFAULT_L1_COEFF),
            Architecture::JumpRelu { .. } => self.sparsity_coeff.unwrap_or(DEFAULT_JUMPRELU_COEFF),
            _ => 0.0,
        }
    }

    fn warmup_steps(&self, arch: &Architecture) -> usize {
        match arch {
            Architecture::L1 => (self.l1_warmup_fraction * self.steps() as f64).round() as usize,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRecord {
    pub step: usize,
    pub samples: u64,
    pub l0: f64,
    pub mse: f64,
    pub recon_loss: f64,
    pub sparsity_loss: f64,
    pub aux: f64,
    pub total: f64,
    pub multiplier: f64,
    pub sparsity_coeff: f32,
    pub lr: f32,
    pub dead_count: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTelemetry {
    /// Every `telemetry_interval` steps and the final step.
    pub records: Vec<TelemetryRecord>,
    pub l0_history: Vec<f32>,
    pub multiplier_history: Vec<f64>,
    pub final_dead_count: usize,
}

impl TrainTelemetry {
    /// Mean batch L0 over the last `fraction` of steps.
    pub fn tail_mean_l0(&self, fraction: f64) -> f64 {
        let n = self.l0_history.len();
        let k = ((n as f64 * fraction).ceil() as usize).clamp(1.min(n), n);
        if k == 0 {
            return f64::NAN;
        }
        self.l0_history[n - k..].iter().map(|&v| v as f64).sum::<f64>() / k as f64
    }
}

/// Hooks for streaming telemetry and checkpoints out of a run.
pub trait TrainObserver {
    fn on_record(&mut self, _record: &TelemetryRecord) -> Result<()> {
        Ok(())
    }
    fn on_checkpoint(&mut self, _step: usize, _sae: &SaeModel) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Fresh SAE with the decoder bias set to the mean of the first training
/// samples.
pub fn init_sae(source: &dyn BatchSource, sae_cfg: &SaeConfig, cfg: &TrainConfig, seed: u64) -> Result<SaeModel> {
    let b_dec = if cfg.b_dec_init_samples == 0 {
        Array1::zeros(source.hidden_dim())
    } else {
        source
            .batch(cfg.b_dec_init_samples, 0)
            .mean_axis(Axis(0))
            .expect("non-empty")
    };
    SaeModel::init(sae_cfg, b_dec, seed)
}

fn for_each_batch<S: BatchSource + ?Sized>(
    source: &S,
    batch_size: usize,
    steps: usize,
    prefetch: bool,
    mut body: impl FnMut(usize, Array2<f32>) -> Result<()>,
) -> Result<()> {
    if !prefetch {
        for step in 0..steps {
            body(step, source.batch(batch_size, step as u64))?;
        }
        return Ok(());
    }
    std::thread::scope(|scope| {
        let (tx, rx) = mpsc::sync_channel::<Array2<f32>>(2);
        scope.spawn(move || {
            for step in 0..steps {
                if tx.send(source.batch(batch_size, step as u64)).is_err() {
                    break;
                }
            }
        });
        let mut step = 0;
        while let Some(batch) = recv_cooperative(&rx) {
            body(step, batch)?;
            step += 1;
        }
        Ok(())
    })
}

/// Blocking receive that keeps a rayon worker busy while it waits. The
/// producer samples through the same pool, so parking the worker would
/// deadlock once every worker is waiting on its own prefetch thread.
fn recv_cooperative<T>(rx: &mpsc::Receiver<T>) -> Option<T> {
    if rayon::current_thread_index().is_none() {
        return rx.recv().ok();
    }
    loop {
        match rx.try_recv() {
            Ok(v) => return Some(v),
            Err(mpsc::TryRecvError::Disconnected) => return None,
            Err(mpsc::TryRecvError::Empty) => {
                if rayon::yield_now() != Some(rayon::Yield::Executed) {
                    std::thread::sleep(std::time::Duration::from_micros(20));
                }
            }
        }
    }
}

/// Train `sae` in place on `total_samples / batch_size` batches.
pub fn train<S: BatchSource + ?Sized>(
    source: &S,
    sae: &mut SaeModel,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainTelemetry> {
    cfg.validate(&sae.arch)?;
    if source.hidden_dim() != sae.hidden_dim() {
        return Err(Error::Shape(format!(
            "batch source has dimension {}, SAE expects {}",
            source.hidden_dim(),
            sae.hidden_dim()
        )));
    }
    let steps = cfg.steps();
    let mut telemetry = TrainTelemetry::default();
    if steps == 0 {
        return Ok(telemetry);
    }
    let arch = sae.arch.clone();
    let sizes: Vec<usize> = sae.params_mut().iter().map(|p| p.len()).collect();
    let mut adam = Adam::new(&sizes, cfg.adam);
    let mut tracker = DeadLatentTracker::new(sae.width(), cfg.dead_window);
    let mut tuner = cfg
        .target_l0
        .map(|t| Autotuner::new(t, cfg.autotuner))
        .transpose()?;
    let base_coeff = cfg.base_coeff(&arch);
    let warmup = cfg.warmup_steps(&arch);
    let k_aux = cfg.k_aux.unwrap_or(sae.hidden_dim() / 2).max(1);
    let tail_start = steps - (steps / 10).max(1);
    let mut cutoff_sum = 0.0f64;
    let mut cutoff_n = 0usize;
    let mut multiplier = 1.0f64;

    for_each_batch(source, cfg.batch_size, steps, cfg.prefetch, |step, x| {
        let lr = lr_schedule(step, steps, cfg.lr);
        let coeff = effective_coeff(base_coeff, step, warmup, multiplier);
        let fwd = sae.forward(x.view())?;
        let dead = tracker.dead_mask();
        let loss_cfg = LossConfig {
            sparsity_coeff: coeff,
            aux_coeff: cfg.aux_coeff,
            k_aux,
        };
        let (terms, grads) = sae.loss_and_grads(x.view(), &fwd, &loss_cfg, Some(&dead));
        if !terms.total.is_finite() {
            return Err(non_finite(step, &terms));
        }
        adam.step(sae.params_mut(), grads.slices(), lr)
            .map_err(|e| Error::NonFinite(format!("step {step}: {e}")))?;
        if arch.normalizes_decoder() {
            sae.normalize_decoder();
        }
        sae.clamp_thresholds();
        tracker.observe(&fwd.active);
        if step >= tail_start {
            if let Some(c) = fwd.batch_cutoff {
                cutoff_sum += c as f64;
                cutoff_n += 1;
            }
        }
        let record_multiplier = multiplier;
        if let Some(t) = tuner.as_mut() {
            if step >= warmup {
                multiplier = t.step(terms.l0);
            }
        }
        telemetry.l0_history.push(terms.l0 as f32);
        telemetry.multiplier_history.push(multiplier);
        if step % cfg.telemetry_interval == 0 || step + 1 == steps {
            let rec = TelemetryRecord {
                step,
                samples: ((step + 1) * cfg.batch_size) as u64,
                l0: terms.l0,
                mse: terms.mse,
                recon_loss: terms.recon_loss,
                sparsity_loss: terms.sparsity_loss,
                aux: terms.aux,
                total: terms.total,
                multiplier: record_multiplier,
                sparsity_coeff: coeff,
                lr,
                dead_count: tracker.dead_count(),
            };
            observer.on_record(&rec)?;
            telemetry.records.push(rec);
        }
        if let Some(every) = cfg.checkpoint_interval {
            if every > 0 && (step + 1) % every == 0 && step + 1 != steps {
                observer.on_checkpoint(step + 1, sae)?;
            }
        }
        Ok(())
    })?;

    if cutoff_n > 0 {
        sae.inference_threshold = Some((cutoff_sum / cutoff_n as f64) as f32);
    }
    telemetry.final_dead_count = tracker.dead_count();
    observer.on_checkpoint(steps, sae)?;
    Ok(telemetry)
}

fn non_finite(step: usize, t: &LossTerms) -> Error {
    Error::NonFinite(format!(
        "loss at step {step}: mse {} sparsity {} aux {} l0 {}",
        t.mse, t.sparsity_loss, t.aux, t.l0
    ))
}
