//! Phase prototypes and training objectives.
//!
//! The prototype bank keeps one EMA-averaged feature per phase, fed by the
//! pooled features of correctly classified clips. The losses come in two
//! flavours: scalar reference implementations over `f64` slices, and tensor
//! versions used inside the training graph.

use candle_core::{Tensor, D};
use log::debug;

use crate::error::{Error, Result};
use crate::synthgen::PhaseLabel;

/// Per-phase feature prototypes updated by exponential moving average.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    prototypes: Vec<Vec<f64>>,
    initialized: [bool; PhaseLabel::COUNT],
    alpha: f64,
    tp_sum: Vec<Vec<f64>>,
    tp_count: [usize; PhaseLabel::COUNT],
}

impl PrototypeBank {
    pub fn new(channels: usize, alpha: f64) -> Self {
        Self {
            prototypes: vec![vec![0.0; channels]; PhaseLabel::COUNT],
            initialized: [false; PhaseLabel::COUNT],
            alpha,
            tp_sum: vec![vec![0.0; channels]; PhaseLabel::COUNT],
            tp_count: [0; PhaseLabel::COUNT],
        }
    }

    pub fn channels(&self) -> usize {
        self.prototypes[0].len()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn prototype(&self, phase: PhaseLabel) -> Option<&[f64]> {
        self.initialized[phase.id()].then(|| self.prototypes[phase.id()].as_slice())
    }

    pub fn initialized(&self) -> [bool; PhaseLabel::COUNT] {
        self.initialized
    }

    /// True once every phase has a prototype; masking and the contrastive
    /// loss stay off until then.
    pub fn is_complete(&self) -> bool {
        self.initialized.iter().all(|&b| b)
    }

    pub fn pending(&self, phase: PhaseLabel) -> usize {
        self.tp_count[phase.id()]
    }

    /// Records the pooled feature of a true-positive clip for `phase`.
    pub fn accumulate_tp(&mut self, pooled: &[f64], phase: PhaseLabel) {
        let j = phase.id();
        for (s, v) in self.tp_sum[j].iter_mut().zip(pooled) {
            *s += v;
        }
        self.tp_count[j] += 1;
    }

    /// Applies the EMA update for every phase with pending true positives and
    /// clears the buffers. A phase without a prototype takes the buffer mean.
    pub fn flush_ema(&mut self) {
        for j in 0..PhaseLabel::COUNT {
            let n = self.tp_count[j];
            if n == 0 {
                continue;
            }
            let alpha = if self.initialized[j] { self.alpha } else { 0.0 };
            for (p, s) in self.prototypes[j].iter_mut().zip(&self.tp_sum[j]) {
                *p = (1.0 - alpha) * (s / n as f64) + alpha * *p;
            }
            self.initialized[j] = true;
            self.tp_sum[j].iter_mut().for_each(|s| *s = 0.0);
            self.tp_count[j] = 0;
        }
    }

    /// Directly installs a prototype (checkpoint restore, tests).
    pub fn set_prototype(&mut self, phase: PhaseLabel, values: Vec<f64>) {
        assert_eq!(values.len(), self.channels());
        self.prototypes[phase.id()] = values;
        self.initialized[phase.id()] = true;
    }

    /// Cosine relevance of a pooled clip feature to each phase prototype;
    /// `None` for uninitialised prototypes.
    pub fn relevance(&self, pooled: &[f64]) -> Vec<Option<f64>> {
        PhaseLabel::ALL
            .iter()
            .map(|&p| self.prototype(p).map(|proto| cosine(pooled, proto)))
            .collect()
    }

    /// Raw prototype rows regardless of initialisation, for serialisation.
    pub fn raw_prototypes(&self) -> &[Vec<f64>] {
        &self.prototypes
    }

    pub fn from_raw(prototypes: Vec<Vec<f64>>, initialized: [bool; PhaseLabel::COUNT], alpha: f64) -> Self {
        let c = prototypes.first().map_or(0, Vec::len);
        Self {
            prototypes,
            initialized,
            alpha,
            tp_sum: vec![vec![0.0; c]; PhaseLabel::COUNT],
            tp_count: [0; PhaseLabel::COUNT],
        }
    }
}

/// Cosine similarity; zero-norm inputs give 0.
pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        debug!("zero-norm vector in relevance, defaulting to 0");
        return 0.0;
    }
    dot / (nu * nv)
}

/// Relevance `R_k` of one pooled clip feature against the bank.
pub fn compute_relevance(pooled: &[f64], bank: &PrototypeBank) -> Vec<Option<f64>> {
    bank.relevance(pooled)
}

pub fn euclid(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

/// `½‖f − p_y‖² + ½·max(0, 1 − ‖f − p_ŷ‖)²` for one false-positive clip.
pub fn contrastive_loss(f: &[f64], p_true: &[f64], p_pred: &[f64]) -> f64 {
    let pull = euclid(f, p_true);
    let hinge = (1.0 - euclid(f, p_pred)).max(0.0);
    0.5 * pull * pull + 0.5 * hinge * hinge
}

/// Analytic gradient of [`contrastive_loss`] with respect to `f`.
pub fn contrastive_grad(f: &[f64], p_true: &[f64], p_pred: &[f64]) -> Vec<f64> {
    let dist = euclid(f, p_pred);
    let hinge = (1.0 - dist).max(0.0);
    f.iter()
        .zip(p_true)
        .zip(p_pred)
        .map(|((fi, ti), pi)| {
            let push = if hinge > 0.0 && dist > 0.0 { hinge * (fi - pi) / dist } else { 0.0 };
            (fi - ti) - push
        })
        .collect()
}

/// Mean negative log-likelihood of `labels` under `probs`, logs clamped at 1e-12.
pub fn cross_entropy(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    assert_eq!(probs.len(), labels.len());
    if probs.is_empty() {
        return 0.0;
    }
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(row, &y)| -row[y].max(1e-12).ln())
        .sum();
    total / probs.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub ce_phase: f64,
    pub ce_effect: f64,
    pub contrastive: f64,
    pub total: f64,
    pub lambda_cl: f64,
}

pub fn total_loss(ce_phase: f64, ce_effect: f64, contrastive: f64, lambda_cl: f64) -> Result<LossReport> {
    for (name, v) in [("ce_phase", ce_phase), ("ce_effect", ce_effect), ("contrastive", contrastive)] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("loss term {name} is {v}")));
        }
    }
    Ok(LossReport {
        ce_phase,
        ce_effect,
        contrastive,
        total: ce_phase + ce_effect + lambda_cl * contrastive,
        lambda_cl,
    })
}

/// Mean cross-entropy of integer `labels` (u32 tensor) under `logits` `(n, K)`.
pub fn cross_entropy_logits(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    let log_probs = shifted.broadcast_sub(&lse)?;
    let picked = log_probs.gather(&labels.unsqueeze(1)?, 1)?;
    Ok(picked.mean_all()?.neg()?)
}

/// Batched contrastive loss: rows of `f`, `p_true`, `p_pred` are `(n, c)`;
/// returns the mean over rows.
pub fn contrastive_loss_tensor(f: &Tensor, p_true: &Tensor, p_pred: &Tensor) -> Result<Tensor> {
    let pull = (f - p_true)?.sqr()?.sum(D::Minus1)?;
    let dist = (f - p_pred)?.sqr()?.sum(D::Minus1)?.sqrt()?;
    let hinge = dist.neg()?.affine(1.0, 1.0)?.relu()?.sqr()?;
    Ok(((pull + hinge)? * 0.5)?.mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ema_alpha_zero_takes_mean() {
        let mut bank = PrototypeBank::new(2, 0.0);
        bank.set_prototype(PhaseLabel::Knotting, vec![9.0, 9.0]);
        for v in [[1.0, 2.0], [3.0, 4.0], [5.0, 0.0]] {
            bank.accumulate_tp(&v, PhaseLabel::Knotting);
        }
        assert_eq!(bank.pending(PhaseLabel::Knotting), 3);
        bank.flush_ema();
        assert_eq!(bank.prototype(PhaseLabel::Knotting).unwrap(), &[3.0, 2.0]);
        assert_eq!(bank.pending(PhaseLabel::Knotting), 0);
    }

    #[test]
    fn ema_alpha_one_keeps_prototype() {
        let mut bank = PrototypeBank::new(2, 1.0);
        bank.set_prototype(PhaseLabel::Resecting, vec![0.5, -1.0]);
        bank.accumulate_tp(&[7.0, 7.0], PhaseLabel::Resecting);
        bank.flush_ema();
        assert_eq!(bank.prototype(PhaseLabel::Resecting).unwrap(), &[0.5, -1.0]);
    }

    #[test]
    fn ema_default_momentum() {
        let mut bank = PrototypeBank::new(3, 0.99);
        let p = vec![1.0, -2.0, 0.25];
        let v = [4.0, 0.5, -3.0];
        bank.set_prototype(PhaseLabel::Preparing, p.clone());
        bank.accumulate_tp(&v, PhaseLabel::Preparing);
        bank.flush_ema();
        let got = bank.prototype(PhaseLabel::Preparing).unwrap();
        for i in 0..3 {
            assert!((got[i] - (0.01 * v[i] + 0.99 * p[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn cold_start_uses_first_mean_and_leaves_others() {
        let mut bank = PrototypeBank::new(1, 0.99);
        bank.accumulate_tp(&[2.0], PhaseLabel::Knotting);
        bank.accumulate_tp(&[4.0], PhaseLabel::Knotting);
        bank.flush_ema();
        assert_eq!(bank.prototype(PhaseLabel::Knotting).unwrap(), &[3.0]);
        assert!(bank.prototype(PhaseLabel::Releasing).is_none());
        assert!(!bank.is_complete());
    }

    #[test]
    fn relevance_cases() {
        let mut bank = PrototypeBank::new(3, 0.9);
        bank.set_prototype(PhaseLabel::Knotting, vec![1.0, 2.0, 3.0]);
        bank.set_prototype(PhaseLabel::Resecting, vec![0.0, 0.0, 1.0]);
        let r = compute_relevance(&[1.0, 2.0, 3.0], &bank);
        assert!((r[1].unwrap() - 1.0).abs() < 1e-15);
        assert!(r[0].is_none());
        let r = compute_relevance(&[1.0, 0.0, 0.0], &bank);
        assert_eq!(r[2], Some(0.0));
        assert_eq!(compute_relevance(&[0.0, 0.0, 0.0], &bank)[1], Some(0.0));
    }

    #[test]
    fn relevance_matches_direct_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut bank = PrototypeBank::new(8, 0.9);
        let protos: Vec<Vec<f64>> = (0..3).map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        for (p, v) in PhaseLabel::ALL.iter().zip(&protos) {
            bank.set_prototype(*p, v.clone());
        }
        let f: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = compute_relevance(&f, &bank);
        for (j, p) in protos.iter().enumerate() {
            let mut dot = 0.0;
            let mut nf = 0.0;
            let mut np = 0.0;
            for i in 0..8 {
                dot += f[i] * p[i];
                nf += f[i] * f[i];
                np += p[i] * p[i];
            }
            assert!((r[j].unwrap() - dot / (nf.sqrt() * np.sqrt())).abs() < 1e-6);
        }
    }

    #[test]
    fn euclid_cases() {
        assert_eq!(euclid(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(euclid(&[3.0, 4.0], &[0.0, 0.0]), 5.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u: Vec<f64> = (0..16).map(|_| rng.random_range(-5.0..5.0)).collect();
        let v: Vec<f64> = (0..16).map(|_| rng.random_range(-5.0..5.0)).collect();
        let mut ss = 0.0;
        for i in 0..16 {
            ss += (u[i] - v[i]).powi(2);
        }
        assert!((euclid(&u, &v) - ss.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn contrastive_closed_forms() {
        let py = [0.0, 0.0];
        let pyhat = [3.0, 0.0];
        assert_eq!(contrastive_loss(&py, &py, &pyhat), 0.0);
        let f = [0.6, 0.8];
        let delta = 1.0;
        let got = contrastive_loss(&f, &[0.0, 0.0], &f);
        assert!((got - (0.5 * delta * delta + 0.5)).abs() < 1e-10);
    }

    #[test]
    fn tensor_losses_match_scalar_versions() {
        let dev = Device::Cpu;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows = 6;
        let c = 5;
        let mut gen = |scale: f64| -> Vec<Vec<f64>> {
            (0..rows).map(|_| (0..c).map(|_| rng.random_range(-scale..scale)).collect()).collect()
        };
        let f = gen(1.0);
        let py = gen(1.0);
        let pp = gen(0.4);
        let t = |m: &Vec<Vec<f64>>| Tensor::new(m.clone(), &dev).unwrap();
        let got = contrastive_loss_tensor(&t(&f), &t(&py), &t(&pp)).unwrap().to_scalar::<f64>().unwrap();
        let want: f64 = (0..rows).map(|i| contrastive_loss(&f[i], &py[i], &pp[i])).sum::<f64>() / rows as f64;
        assert!((got - want).abs() < 1e-12);

        let logits = gen(3.0);
        let labels: Vec<u32> = (0..rows as u32).map(|i| i % c as u32).collect();
        let ce = cross_entropy_logits(&t(&logits), &Tensor::new(labels.clone(), &dev).unwrap())
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        let probs: Vec<Vec<f64>> = logits
            .iter()
            .map(|row| {
                let z: f64 = row.iter().map(|v| v.exp()).sum();
                row.iter().map(|v| v.exp() / z).collect()
            })
            .collect();
        let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
        assert!((ce - cross_entropy(&probs, &labels)).abs() < 1e-12);
    }

    #[test]
    fn total_loss_composition() {
        let r = total_loss(1.0, 0.5, 2.0, 0.1).unwrap();
        assert!((r.total - 1.7).abs() < 1e-15);
        assert_eq!(total_loss(1.0, 0.5, 0.0, 0.1).unwrap().total, 1.5);
        assert_eq!(total_loss(1.0, 0.5, 123.0, 0.0).unwrap().total, 1.5);
        match total_loss(f64::NAN, 0.0, 0.0, 0.1) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("ce_phase")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
