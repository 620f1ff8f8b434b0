//! Hinge-loss SVM objective and its stochastic subgradient solver.
//!
//! The objective over a flat parameter vector `w` is
//!
//! ```text
//! J(w) = ½‖w − a‖² + C · Σᵢ max(0, 1 − yᵢ · w·φᵢ)
//! ```
//!
//! where `a` is a fixed anchor: zero for ordinary training, the β-scaled
//! source model during adaptation.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// One labeled feature vector occupying `values.len()` entries of the flat
/// parameter vector starting at `offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// +1 for objects, -1 for background.
    pub label: f64,
    pub offset: usize,
    pub values: Vec<f32>,
}

impl Sample {
    pub fn new(label: f64, offset: usize, values: &[f64]) -> Self {
        Self {
            label,
            offset,
            values: values.iter().map(|&v| v as f32).collect(),
        }
    }

    #[inline]
    pub fn dot(&self, w: &[f64]) -> f64 {
        let w = &w[self.offset..self.offset + self.values.len()];
        let mut acc = [0.0f64; 4];
        let cw = w.chunks_exact(4);
        let cv = self.values.chunks_exact(4);
        let tail: f64 = cw
            .remainder()
            .iter()
            .zip(cv.remainder())
            .map(|(a, &b)| a * b as f64)
            .sum();
        for (a, b) in cw.zip(cv) {
            for k in 0..4 {
                acc[k] += a[k] * b[k] as f64;
            }
        }
        (acc[0] + acc[2]) + (acc[1] + acc[3]) + tail
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|&v| v as f64 * v as f64).sum()
    }

    #[inline]
    fn axpy(&self, alpha: f64, w: &mut [f64]) {
        let w = &mut w[self.offset..self.offset + self.values.len()];
        for (a, &b) in w.iter_mut().zip(&self.values) {
            *a += alpha * b as f64;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    /// Passes over the samples per solve.
    pub epochs: usize,
    /// Initial step in units of `1 / max‖φ‖²`.
    pub eta0: f64,
    /// `t0 = t0_factor * N`.
    pub t0_factor: f64,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            eta0: 0.3,
            t0_factor: 10.0,
            seed: 0,
        }
    }
}

fn reg(w: &[f64], anchor: &[f64]) -> f64 {
    0.5 * w.iter().zip(anchor).map(|(x, a)| (x - a) * (x - a)).sum::<f64>()
}

/// `Σ max(0, 1 − y w·φ)` over all samples.
pub fn hinge_sum(w: &[f64], samples: &[Sample]) -> f64 {
    samples.iter().map(|s| (1.0 - s.label * s.dot(w)).max(0.0)).sum()
}

pub fn objective(w: &[f64], anchor: &[f64], samples: &[Sample], c: f64) -> f64 {
    reg(w, anchor) + c * hinge_sum(w, samples)
}

/// Subgradient of [`objective`]; at a hinge kink the loss term contributes zero.
pub fn subgradient(w: &[f64], anchor: &[f64], samples: &[Sample], c: f64) -> Vec<f64> {
    let mut g: Vec<f64> = w.iter().zip(anchor).map(|(x, a)| x - a).collect();
    for s in samples {
        if s.label * s.dot(w) < 1.0 {
            s.axpy(-c * s.label, &mut g);
        }
    }
    g
}

/// Fraction of samples on the wrong side of the decision boundary.
pub fn training_error(w: &[f64], samples: &[Sample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let wrong = samples.iter().filter(|s| s.label * s.dot(w) <= 0.0).count();
    wrong as f64 / samples.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub objective: f64,
    pub train_error: f64,
}

#[derive(Debug, Clone)]
pub struct SgdOutcome {
    pub w: Vec<f64>,
    pub objective: f64,
    pub epochs: Vec<EpochStats>,
}

fn project(w: &mut [f64], bounds: &[(usize, f64)]) {
    for &(k, lb) in bounds {
        if w[k] < lb {
            w[k] = lb;
        }
    }
}

/// Stochastic subgradient descent on [`objective`], warm-started at `w0`.
///
/// Each step follows the per-sample subgradient of `J / (C·N)` with step
/// `η_t = η₀ / (R² (1 + t / t₀))`, where `R²` is the largest squared sample
/// norm. The iterate is stored as `a + s·v` so the
/// shrink towards the anchor is O(1). Entries listed in `bounds` are kept
/// at or above their lower bound. The returned vector is whichever of the
/// start point, the last iterate and the last-epoch average has the lowest
/// objective, so a solve never makes the objective worse.
pub fn ssvm_sgd(
    w0: &[f64],
    anchor: &[f64],
    samples: &[Sample],
    c: f64,
    cfg: &SgdConfig,
    bounds: &[(usize, f64)],
    stream_salt: u64,
) -> Result<SgdOutcome> {
    if w0.len() != anchor.len() {
        return Err(Error::Layout {
            expected: w0.len(),
            actual: anchor.len(),
        });
    }
    if !(c > 0.0) {
        return Err(Error::Config(format!("C must be positive, got {c}")));
    }
    let mut start = w0.to_vec();
    project(&mut start, bounds);
    let start_obj = objective(&start, anchor, samples, c);
    if samples.is_empty() || cfg.epochs == 0 {
        return Ok(SgdOutcome {
            w: start,
            objective: start_obj,
            epochs: vec![],
        });
    }
    let n = samples.len();
    let lambda = 1.0 / (c * n as f64);
    let t0 = cfg.t0_factor * n as f64;
    let r2 = samples.iter().map(Sample::norm_sq).fold(0.0, f64::max).max(1e-12);
    let anchor_dots: Vec<f64> = samples.iter().map(|s| s.dot(anchor)).collect();

    let mut v: Vec<f64> = start.iter().zip(anchor).map(|(x, a)| x - a).collect();
    let mut scale = 1.0f64;
    let mut avg = vec![0.0; w0.len()];
    let mut avg_count = 0usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng::stream(rng::derive_seed(cfg.seed, stream_salt), rng::streams::SGD);
    let mut t = 0usize;
    let mut stats = Vec::with_capacity(cfg.epochs);
    let materialize = |v: &[f64], scale: f64| -> Vec<f64> { anchor.iter().zip(v).map(|(a, x)| a + scale * x).collect() };

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let last = epoch + 1 == cfg.epochs;
        for &i in &order {
            let s = &samples[i];
            // shrink by at most one half per step
            let eta = (cfg.eta0 / (r2 * (1.0 + t as f64 / t0))).min(0.5 / lambda);
            let margin = s.label * (anchor_dots[i] + scale * s.dot(&v));
            scale *= 1.0 - eta * lambda;
            if scale < 1e-9 {
                for x in v.iter_mut() {
                    *x *= scale;
                }
                scale = 1.0;
            }
            if margin < 1.0 {
                s.axpy(eta * s.label / scale, &mut v);
            }
            for &(k, lb) in bounds {
                if anchor[k] + scale * v[k] < lb {
                    v[k] = (lb - anchor[k]) / scale;
                }
            }
            if last {
                for ((acc, a), x) in avg.iter_mut().zip(anchor).zip(&v) {
                    *acc += a + scale * x;
                }
                avg_count += 1;
            }
            t += 1;
        }
        let w = materialize(&v, scale);
        let obj = objective(&w, anchor, samples, c);
        if !obj.is_finite() {
            return Err(Error::Solver(format!("objective diverged in epoch {epoch}")));
        }
        stats.push(EpochStats {
            epoch,
            objective: obj,
            train_error: training_error(&w, samples),
        });
    }
    let last = materialize(&v, scale);
    let last_obj = stats.last().map(|s| s.objective).unwrap_or(f64::INFINITY);
    for x in avg.iter_mut() {
        *x /= avg_count as f64;
    }
    project(&mut avg, bounds);
    let avg_obj = objective(&avg, anchor, samples, c);

    let mut best = (start, start_obj);
    for cand in [(last, last_obj), (avg, avg_obj)] {
        if cand.1 < best.1 {
            best = cand;
        }
    }
    Ok(SgdOutcome {
        w: best.0,
        objective: best.1,
        epochs: stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn toy(rng: &mut impl Rng, n: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let y = if i % 2 == 0 { 1.0 } else { -1.0 };
                let x = [y * 2.0 + rng.gen_range(-0.5..0.5), rng.gen_range(-1.0..1.0), 1.0];
                Sample::new(y, 0, &x)
            })
            .collect()
    }

    /// Batch subgradient descent with a decaying step, tracking the best iterate.
    fn batch_oracle(dim: usize, samples: &[Sample], c: f64) -> f64 {
        let anchor = vec![0.0; dim];
        let mut w = vec![0.0; dim];
        let mut best = f64::INFINITY;
        for k in 0..200_000 {
            let g = subgradient(&w, &anchor, samples, c);
            let step = 0.5 / (1.0 + k as f64).sqrt();
            for (x, d) in w.iter_mut().zip(&g) {
                *x -= step * d;
            }
            best = best.min(objective(&w, &anchor, samples, c));
        }
        best
    }

    #[test]
    fn separable_toy_matches_batch_oracle() {
        let mut rng = rng::stream(5, 0);
        let samples = toy(&mut rng, 40);
        let c = 0.5;
        let cfg = SgdConfig {
            epochs: 300,
            eta0: 0.3,
            t0_factor: 10.0,
            seed: 1,
        };
        let out = ssvm_sgd(&[0.0; 3], &[0.0; 3], &samples, c, &cfg, &[], 0).unwrap();
        assert_eq!(training_error(&out.w, &samples), 0.0);
        let oracle = batch_oracle(3, &samples, c);
        assert!(
            (out.objective - oracle).abs() <= 0.01 * oracle,
            "sgd {} vs oracle {}",
            out.objective,
            oracle
        );
    }

    #[test]
    fn tiny_c_drives_weights_to_zero() {
        let mut rng = rng::stream(6, 0);
        let samples = toy(&mut rng, 20);
        let cfg = SgdConfig::default();
        let out = ssvm_sgd(&[0.0; 3], &[0.0; 3], &samples, 1e-9, &cfg, &[], 0).unwrap();
        assert!(out.w.iter().all(|x| x.abs() < 1e-6));
    }

    #[test]
    fn deterministic_and_never_worse_than_start() {
        let mut rng = rng::stream(7, 0);
        let samples = toy(&mut rng, 30);
        let cfg = SgdConfig {
            epochs: 2,
            ..Default::default()
        };
        let w0 = [0.3, -0.2, 0.1];
        let a = ssvm_sgd(&w0, &[0.0; 3], &samples, 0.1, &cfg, &[], 4).unwrap();
        let b = ssvm_sgd(&w0, &[0.0; 3], &samples, 0.1, &cfg, &[], 4).unwrap();
        assert_eq!(a.w, b.w);
        assert!(a.objective <= objective(&w0, &[0.0; 3], &samples, 0.1));
    }

    #[test]
    fn bounds_are_respected() {
        let samples = vec![Sample::new(1.0, 0, &[-1.0, 1.0]), Sample::new(-1.0, 0, &[1.0, -1.0])];
        let cfg = SgdConfig {
            epochs: 50,
            ..Default::default()
        };
        let out = ssvm_sgd(&[0.5, 0.0], &[0.0; 2], &samples, 1.0, &cfg, &[(0, 0.01)], 0).unwrap();
        assert!(out.w[0] >= 0.01);
    }

    #[test]
    fn subgradient_matches_finite_differences() {
        let mut rng = rng::stream(8, 0);
        for _ in 0..50 {
            let dim = 6;
            let samples: Vec<Sample> = (0..8)
                .map(|i| {
                    let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    Sample::new(if i % 2 == 0 { 1.0 } else { -1.0 }, rng.gen_range(0..3), &x)
                })
                .collect();
            let w: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let a: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let h = 1e-6;
            let near_kink = samples.iter().any(|s| (1.0 - s.label * s.dot(&w)).abs() < 1e-3);
            if near_kink {
                continue;
            }
            let g = subgradient(&w, &a, &samples, 0.3);
            for k in 0..dim {
                let (mut wp, mut wm) = (w.clone(), w.clone());
                wp[k] += h;
                wm[k] -= h;
                let fd = (objective(&wp, &a, &samples, 0.3) - objective(&wm, &a, &samples, 0.3)) / (2.0 * h);
                assert!((fd - g[k]).abs() <= 1e-4 * g[k].abs().max(1.0));
            }
        }
    }
}
