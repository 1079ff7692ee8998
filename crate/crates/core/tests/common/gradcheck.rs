//! Analytic SAE gradients against central finite differences of an
//! independent f64 loss implementation. Discrete choices (active sets,
//! auxiliary selections, pursuit selections) are frozen at the base point.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use synthsae::rng;
use synthsae::sae::{
    jumprelu_l0_threshold_grad, Architecture, LossConfig, SaeConfig, SaeGrads, SaeModel,
};

const B: usize = 5;
const D: usize = 6;
const L: usize = 8;
const H: f64 = 1e-6;

#[derive(Clone, Copy)]
struct Layout {
    enc: bool,
}

impl Layout {
    fn we(&self) -> std::ops::Range<usize> {
        if self.enc {
            0..L * D
        } else {
            0..0
        }
    }
    fn be(&self) -> std::ops::Range<usize> {
        let s = self.we().end;
        s..s + if self.enc { L } else { 0 }
    }
    fn wd(&self) -> std::ops::Range<usize> {
        let s = self.be().end;
        s..s + L * D
    }
    fn bd(&self) -> std::ops::Range<usize> {
        let s = self.wd().end;
        s..s + D
    }
}

struct Frozen {
    /// (row, latent) pairs allowed to be nonzero
    active: Vec<Vec<usize>>,
    /// ranges of latents feeding each reconstruction target
    ranges: Vec<(usize, usize)>,
    /// per range, per row: auxiliary latents
    aux_sel: Vec<Vec<Vec<usize>>>,
    /// per range: detached residual target and dead-count scale
    aux_target: Vec<Vec<f64>>,
    aux_scale: Vec<f64>,
    mp_sel: Vec<Vec<usize>>,
}

struct Toy {
    x: Vec<f64>,
    lam: f64,
    aux_coeff: f64,
    l1: bool,
}

fn pre(p: &[f64], lay: Layout, x: &[f64]) -> Vec<f64> {
    let (we, be, bd) = (&p[lay.we()], &p[lay.be()], &p[lay.bd()]);
    let mut out = vec![0.0; B * L];
    for b in 0..B {
        for j in 0..L {
            let mut acc = be[j];
            for k in 0..D {
                acc += (x[b * D + k] - bd[k]) * we[j * D + k];
            }
            out[b * L + j] = acc;
        }
    }
    out
}

fn recon(p: &[f64], lay: Layout, f: &[f64], upto: usize) -> Vec<f64> {
    let (wd, bd) = (&p[lay.wd()], &p[lay.bd()]);
    let mut out = vec![0.0; B * D];
    for b in 0..B {
        for k in 0..D {
            let mut acc = bd[k];
            for j in 0..upto {
                acc += f[b * L + j] * wd[j * D + k];
            }
            out[b * D + k] = acc;
        }
    }
    out
}

fn sq_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / B as f64
}

fn encoder_loss(p: &[f64], lay: Layout, toy: &Toy, fz: &Frozen) -> f64 {
    let pr = pre(p, lay, &toy.x);
    let mut f = vec![0.0; B * L];
    for (b, act) in fz.active.iter().enumerate() {
        for &j in act {
            f[b * L + j] = pr[b * L + j];
        }
    }
    let mut loss = 0.0;
    for &(_, hi) in &fz.ranges {
        loss += sq_err(&toy.x, &recon(p, lay, &f, hi));
    }
    if toy.l1 {
        loss += toy.lam * f.iter().sum::<f64>() / B as f64;
    }
    let wd = &p[lay.wd()];
    for (r, sel) in fz.aux_sel.iter().enumerate() {
        let mut total = 0.0;
        for (b, rows) in sel.iter().enumerate() {
            for k in 0..D {
                let mut e_hat = 0.0;
                for &j in rows {
                    e_hat += pr[b * L + j].max(0.0) * wd[j * D + k];
                }
                total += (e_hat - fz.aux_target[r][b * D + k]).powi(2);
            }
        }
        loss += toy.aux_coeff * fz.aux_scale[r] * total / B as f64;
    }
    loss
}

fn mp_loss(p: &[f64], lay: Layout, toy: &Toy, fz: &Frozen) -> f64 {
    let (wd, bd) = (&p[lay.wd()], &p[lay.bd()]);
    let mut loss = 0.0;
    for b in 0..B {
        let mut r: Vec<f64> = (0..D).map(|k| toy.x[b * D + k] - bd[k]).collect();
        for &j in &fz.mp_sel[b] {
            let w = &wd[j * D..(j + 1) * D];
            let alpha: f64 = w.iter().zip(&r).map(|(a, c)| a * c).sum();
            r.iter_mut().zip(w).for_each(|(ri, wi)| *ri -= alpha * wi);
        }
        loss += r.iter().map(|v| v * v).sum::<f64>();
    }
    loss / B as f64
}

fn flatten(sae: &SaeModel) -> Vec<f64> {
    let mut out = Vec::new();
    if let Some(w) = &sae.w_enc {
        out.extend(w.iter().map(|&v| v as f64));
    }
    if let Some(b) = &sae.b_enc {
        out.extend(b.iter().map(|&v| v as f64));
    }
    out.extend(sae.w_dec.iter().map(|&v| v as f64));
    out.extend(sae.b_dec.iter().map(|&v| v as f64));
    out
}

fn analytic(g: &SaeGrads) -> Vec<f64> {
    let mut out = Vec::new();
    if let Some(w) = &g.w_enc {
        out.extend(w.iter().map(|&v| v as f64));
    }
    if let Some(b) = &g.b_enc {
        out.extend(b.iter().map(|&v| v as f64));
    }
    out.extend(g.w_dec.iter().map(|&v| v as f64));
    out.extend(g.b_dec.iter().map(|&v| v as f64));
    out
}

fn finite_diff(p: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut q = p.to_vec();
    (0..p.len())
        .map(|i| {
            q[i] = p[i] + H;
            let up = f(&q);
            q[i] = p[i] - H;
            let down = f(&q);
            q[i] = p[i];
            (up - down) / (2.0 * H)
        })
        .collect()
}

fn assert_close(name: &str, analytic: &[f64], numeric: &[f64], rel: f64) {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-3);
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        assert!(
            (a - n).abs() <= rel * scale.max(n.abs()),
            "{name}: parameter {i} analytic {a} numeric {n}"
        );
    }
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    assert!(diff <= rel * norm, "{name}: relative error {}", diff / norm);
}

fn toy_input(seed: u64) -> Array2<f32> {
    let mut r = rng::stream(seed, &[77]);
    Array2::from_shape_fn((B, D), |_| r.sample::<f32, _>(StandardNormal) + 0.3)
}

fn toy_sae(arch: Architecture, seed: u64) -> SaeModel {
    let mut cfg = SaeConfig::new(arch, L);
    cfg.init_norm = Some(0.8);
    let mut sae = SaeModel::init(&cfg, Array1::from_elem(D, 0.05), seed).unwrap();
    let mut r = rng::stream(seed, &[78]);
    if let Some(b) = &mut sae.b_enc {
        b.iter_mut().for_each(|v| *v = 0.3 * r.sample::<f32, _>(StandardNormal));
    }
    sae.w_dec.iter_mut().for_each(|v| *v += 0.05 * r.sample::<f32, _>(StandardNormal));
    sae.b_dec.iter_mut().for_each(|v| *v += 0.1 * r.sample::<f32, _>(StandardNormal));
    sae
}

/// Freeze the discrete choices the oracle needs, computed independently in
/// f64 from the base parameters.
fn freeze(sae: &SaeModel, x: &[f64], dead: &[bool], k_aux: usize, active: Vec<Vec<usize>>) -> Frozen {
    let lay = Layout { enc: true };
    let p = flatten(sae);
    let pr = pre(&p, lay, x);
    let ranges: Vec<(usize, usize)> = match &sae.arch {
        Architecture::MatryoshkaBatchTopK { prefixes, .. } => {
            let mut s = 0;
            prefixes.iter().map(|&m| { let r = (s, m); s = m; r }).collect()
        }
        _ => vec![(0, L)],
    };
    let mut f = vec![0.0; B * L];
    for (b, act) in active.iter().enumerate() {
        for &j in act {
            f[b * L + j] = pr[b * L + j];
        }
    }
    let mut aux_sel = Vec::new();
    let mut aux_target = Vec::new();
    let mut aux_scale = Vec::new();
    if sae.arch.uses_topk_aux() {
        for &(lo, hi) in &ranges {
            let cand: Vec<usize> = (lo..hi).filter(|&j| dead[j]).collect();
            if cand.is_empty() {
                continue;
            }
            let rec = recon(&p, lay, &f, hi);
            aux_target.push(x.iter().zip(&rec).map(|(a, b)| a - b).collect());
            aux_scale.push((cand.len() as f64 / k_aux as f64).min(1.0));
            let take = k_aux.min(cand.len());
            aux_sel.push(
                (0..B)
                    .map(|b| {
                        let mut c: Vec<usize> = cand.iter().copied().filter(|&j| pr[b * L + j] > 0.0).collect();
                        c.sort_by(|&i, &j| pr[b * L + j].partial_cmp(&pr[b * L + i]).unwrap().then(i.cmp(&j)));
                        c.truncate(take);
                        c
                    })
                    .collect(),
            );
        }
    }
    Frozen { active, ranges, aux_sel, aux_target, aux_scale, mp_sel: Vec::new() }
}

pub fn check_encoder_arch(arch: Architecture, lam: f32, aux_coeff: f32, seed: u64) {
    let sae = toy_sae(arch.clone(), seed);
    let x = toy_input(seed);
    let xf: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let dead: Vec<bool> = (0..L).map(|j| j % 3 == 1).collect();
    let k_aux = 2;
    let fwd = sae.forward(x.view()).unwrap();
    let active: Vec<Vec<usize>> = fwd.active.iter().map(|r| r.iter().map(|&(j, _)| j as usize).collect()).collect();
    assert!(active.iter().any(|r| !r.is_empty()), "{}: toy has no active latents", arch.name());
    let cfg = LossConfig { sparsity_coeff: lam, aux_coeff, k_aux };
    let (terms, grads) = sae.loss_and_grads(x.view(), &fwd, &cfg, Some(&dead));
    let fz = freeze(&sae, &xf, &dead, k_aux, active);
    let toy = Toy { x: xf, lam: lam as f64, aux_coeff: aux_coeff as f64, l1: matches!(arch, Architecture::L1) };
    let lay = Layout { enc: true };
    let p = flatten(&sae);
    let base = encoder_loss(&p, lay, &toy, &fz);
    let expected_total = if matches!(arch, Architecture::JumpRelu { .. }) {
        base + lam as f64 * terms.l0
    } else {
        base
    };
    assert!(
        (terms.total - expected_total).abs() < 1e-4 * expected_total.abs().max(1.0),
        "{}: loss {} vs oracle {}",
        arch.name(),
        terms.total,
        expected_total
    );
    let num = finite_diff(&p, |q| encoder_loss(q, lay, &toy, &fz));
    assert_close(arch.name(), &analytic(&grads), &num, 1e-4);
}

/// Rectangle-smoothed Heaviside whose θ-derivative is the straight-through
/// pseudo-derivative.
fn ramp(z: f64, eps: f64) -> f64 {
    ((z + eps / 2.0) / eps).clamp(0.0, 1.0)
}

/// θ gradient against the ramp-smoothed L0 finite difference plus the
/// straight-through gating term.
pub fn check_jumprelu_threshold() {
    let eps = 0.4f32;
    let mut sae = toy_sae(Architecture::JumpRelu { bandwidth: eps }, 21);
    let x = toy_input(21);
    let p0 = sae.pre_activations(x.view()).unwrap();
    // thresholds placed so that several pre-activations land inside the
    // window without sitting on its edges
    let theta = Array1::from_shape_fn(L, |j| (p0[[j % B, j]] + 0.07).max(0.05));
    sae.threshold = Some(theta.clone());
    let fwd = sae.forward(x.view()).unwrap();
    let lam = 0.6f32;
    let cfg = LossConfig { sparsity_coeff: lam, aux_coeff: 0.0, k_aux: 1 };
    let (_, grads) = sae.loss_and_grads(x.view(), &fwd, &cfg, None);

    let (eps, lam) = (eps as f64, lam as f64);
    let pre: Vec<f64> = p0.iter().map(|&v| v as f64).collect();
    let th: Vec<f64> = theta.iter().map(|&v| v as f64).collect();
    let smoothed_l0 = |t: &[f64]| -> f64 {
        (0..B).map(|b| (0..L).map(|j| ramp(pre[b * L + j] - t[j], eps)).sum::<f64>()).sum::<f64>() / B as f64
    };
    let l0_grad = finite_diff(&th, smoothed_l0);
    let prod_l0: Vec<f64> = jumprelu_l0_threshold_grad(p0.view(), theta.view(), eps as f32)
        .iter()
        .map(|&v| v as f64)
        .collect();
    assert_close("jumprelu L0", &prod_l0, &l0_grad, 1e-4);
    assert!(l0_grad.iter().any(|&g| g != 0.0));

    // gating: d recon / d f contracted with the reconstruction gradient,
    // times the -(θ/ε) window
    let xf: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let rec: Vec<f64> = fwd.recon.iter().map(|&v| v as f64).collect();
    let wd: Vec<f64> = sae.w_dec.iter().map(|&v| v as f64).collect();
    let mut expected = l0_grad.iter().map(|g| lam * g).collect::<Vec<_>>();
    for b in 0..B {
        for j in 0..L {
            if (pre[b * L + j] - th[j]).abs() < eps / 2.0 {
                let df: f64 = (0..D).map(|k| 2.0 / B as f64 * (rec[b * D + k] - xf[b * D + k]) * wd[j * D + k]).sum();
                expected[j] += df * (-th[j] / eps);
            }
        }
    }
    let got: Vec<f64> = grads.threshold.unwrap().iter().map(|&v| v as f64).collect();
    assert_close("jumprelu theta", &got, &expected, 1e-4);
}

/// MP gradients with the selections replayed in f64; looser tolerance
/// because the f32 forward pass feeds the residual chain.
pub fn check_matching_pursuit() {
    let sae = toy_sae(Architecture::MatchingPursuit { k: 3 }, 31);
    let x = toy_input(31);
    let fwd = sae.forward(x.view()).unwrap();
    let cfg = LossConfig { sparsity_coeff: 0.0, aux_coeff: 0.0, k_aux: 1 };
    let (terms, grads) = sae.loss_and_grads(x.view(), &fwd, &cfg, None);
    let lay = Layout { enc: false };
    let p = flatten(&sae);
    let xf: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    // selections replayed in f64 from the base point
    let wd = &p[lay.wd()];
    let bd = &p[lay.bd()];
    let mp_sel: Vec<Vec<usize>> = (0..B)
        .map(|b| {
            let mut r: Vec<f64> = (0..D).map(|k| xf[b * D + k] - bd[k]).collect();
            (0..3)
                .map(|_| {
                    let corr: Vec<f64> = (0..L).map(|j| (0..D).map(|k| wd[j * D + k] * r[k]).sum()).collect();
                    let j = (0..L).fold(0, |best, j| if corr[j] > corr[best] { j } else { best });
                    (0..D).for_each(|k| r[k] -= corr[j] * wd[j * D + k]);
                    j
                })
                .collect()
        })
        .collect();
    let prod_sel: Vec<Vec<usize>> =
        fwd.mp_trace.as_ref().unwrap().steps.iter().map(|s| s.iter().map(|&(j, _)| j as usize).collect()).collect();
    assert_eq!(prod_sel, mp_sel);
    let fz = Frozen {
        active: Vec::new(),
        ranges: Vec::new(),
        aux_sel: Vec::new(),
        aux_target: Vec::new(),
        aux_scale: Vec::new(),
        mp_sel,
    };
    let toy = Toy { x: xf, lam: 0.0, aux_coeff: 0.0, l1: false };
    assert!((terms.total - mp_loss(&p, lay, &toy, &fz)).abs() < 1e-4);
    let num = finite_diff(&p, |q| mp_loss(q, lay, &toy, &fz));
    assert_close("matching pursuit", &analytic(&grads), &num, 1e-3);
}
