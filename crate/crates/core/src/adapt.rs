//! Structure-aware adaptation of a source DPM to a target domain.
//!
//! The flat parameter vector is split into structures (one per root, one per
//! part). Each structure `p` of the adapted model is pulled towards a scaled
//! copy `β_p · w_p^S` of the source structure:
//!
//! ```text
//! J(w, β) = ½ Σ_p ‖w_p − β_p w_p^S‖² + ½ γ ‖β‖² + C · Σᵢ max(0, 1 − yᵢ · w·φᵢ)
//! ```
//!
//! `J` is minimized by alternating stochastic subgradient descent on `w`
//! (with `β` fixed the problem is an SVM anchored at `β ⊙ w^S`) and the exact
//! minimizer in `β`.

use std::io::Write;
use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

use crate::data::{subset_images, Dataset, SplitSpec};
use crate::error::{Error, Result};
use crate::model::{vectorize, BiasGrouping, BlockKind, DpmModel, StructurePartition};
use crate::rng;
use crate::train::{self, calibrate_threshold, hinge_sum, run_rounds, ssvm_sgd, Sample, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub gamma: f64,
    #[serde(rename = "C")]
    pub c: f64,
    pub repetitions: usize,
    /// Master seed for target subsets.
    pub seed: u64,
    /// Relabel / mine rounds on the target data.
    pub rounds: usize,
    /// (SGD on w, closed-form β) steps per round.
    pub alternations: usize,
    pub bias_grouping: BiasGrouping,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            gamma: 0.08,
            c: 0.001,
            repetitions: 3,
            seed: 0,
            rounds: 3,
            alternations: 2,
            bias_grouping: BiasGrouping::WithRoot,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::Config(format!("gamma must be finite and >= 0, got {}", self.gamma)));
        }
        if !(self.c > 0.0) {
            return Err(Error::Config(format!("C must be positive, got {}", self.c)));
        }
        if self.repetitions == 0 || self.rounds == 0 || self.alternations == 0 {
            return Err(Error::Config("repetitions, rounds and alternations must be at least 1".into()));
        }
        Ok(())
    }
}

fn check_shapes(w: &[f64], w_s: &[f64], partition: &StructurePartition) -> Result<()> {
    if w.len() != partition.len || w_s.len() != partition.len {
        return Err(Error::Shape(format!(
            "w has {} entries, w^S {}, partition covers {}",
            w.len(),
            w_s.len(),
            partition.len
        )));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `β ⊙ w^S` expanded block by block to the full vector.
pub fn anchor(w_s: &[f64], beta: &[f64], partition: &StructurePartition) -> Vec<f64> {
    let mut a = vec![0.0; w_s.len()];
    for (b, blk) in beta.iter().zip(&partition.blocks) {
        for k in blk.range.clone() {
            a[k] = b * w_s[k];
        }
    }
    a
}

/// The adaptation objective `J(w, β)`.
pub fn objective(
    w: &[f64],
    beta: &[f64],
    w_s: &[f64],
    partition: &StructurePartition,
    samples: &[Sample],
    gamma: f64,
    c: f64,
) -> Result<f64> {
    check_shapes(w, w_s, partition)?;
    if beta.len() != partition.num_blocks() {
        return Err(Error::Shape(format!(
            "beta has {} entries for {} blocks",
            beta.len(),
            partition.num_blocks()
        )));
    }
    let a = anchor(w_s, beta, partition);
    let reg: f64 = w.iter().zip(&a).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(0.5 * reg + 0.5 * gamma * dot(beta, beta) + c * hinge_sum(w, samples))
}

/// Subgradient of [`objective`] in `(w, β)`; at a hinge kink the loss term
/// contributes zero.
pub fn subgradient(
    w: &[f64],
    beta: &[f64],
    w_s: &[f64],
    partition: &StructurePartition,
    samples: &[Sample],
    gamma: f64,
    c: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_shapes(w, w_s, partition)?;
    let a = anchor(w_s, beta, partition);
    let gw = train::subgradient(w, &a, samples, c);
    let gb = beta
        .iter()
        .zip(&partition.blocks)
        .map(|(b, blk)| {
            let r = blk.range.clone();
            let delta: Vec<f64> = w[r.clone()].iter().zip(&a[r.clone()]).map(|(x, y)| x - y).collect();
            gamma * b - dot(&delta, &w_s[r])
        })
        .collect();
    Ok((gw, gb))
}

/// Minimizer of `J` in `β` at fixed `w`: `β_p = ⟨w_p, w_p^S⟩ / (‖w_p^S‖² + γ)`.
pub fn beta_closed_form(w: &[f64], w_s: &[f64], partition: &StructurePartition, gamma: f64) -> Result<Vec<f64>> {
    check_shapes(w, w_s, partition)?;
    partition
        .blocks
        .iter()
        .enumerate()
        .map(|(p, blk)| {
            let ws = &w_s[blk.range.clone()];
            let denom = dot(ws, ws) + gamma;
            if denom == 0.0 {
                return Err(Error::SingularBlock { block: p });
            }
            Ok(dot(&w[blk.range.clone()], ws) / denom)
        })
        .collect()
}

/// One row of the adaptation log: the objective after each half-step.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptLogRow {
    pub round: usize,
    pub alternation: usize,
    /// `start`, `w` or `beta`.
    pub step: &'static str,
    pub objective: f64,
    pub beta_norm: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    pub positives: usize,
    pub negatives: usize,
}

pub const ADAPT_LOG_HEADER: &str = "round,alternation,step,objective,beta_norm,beta_min,beta_max,positives,negatives";

pub fn write_adapt_log<W: Write>(mut w: W, rows: &[AdaptLogRow]) -> Result<()> {
    writeln!(w, "{ADAPT_LOG_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.round, r.alternation, r.step, r.objective, r.beta_norm, r.beta_min, r.beta_max, r.positives, r.negatives
        )?;
    }
    Ok(())
}

fn block_name(kind: &BlockKind) -> String {
    match kind {
        BlockKind::Root { component } => format!("root{component}"),
        BlockKind::Part { component, part } => format!("part{component}.{part}"),
        BlockKind::Bias { component } => format!("bias{component}"),
    }
}

/// `block,structure,beta` rows, one per structure.
pub fn write_beta<W: Write>(mut w: W, beta: &[f64], partition: &StructurePartition) -> Result<()> {
    writeln!(w, "block,structure,beta")?;
    for (p, (b, blk)) in beta.iter().zip(&partition.blocks).enumerate() {
        writeln!(w, "{p},{},{b}", block_name(&blk.kind))?;
    }
    Ok(())
}

pub fn save_beta(path: &Path, beta: &[f64], partition: &StructurePartition) -> Result<()> {
    let mut buf = Vec::new();
    write_beta(&mut buf, beta, partition)?;
    std::fs::write(path, buf)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub model: DpmModel,
    pub beta: Vec<f64>,
    pub partition: StructurePartition,
    pub log: Vec<AdaptLogRow>,
}

fn beta_stats(beta: &[f64]) -> (f64, f64, f64) {
    let norm = dot(beta, beta).sqrt();
    let min = beta.iter().copied().fold(f64::INFINITY, f64::min);
    let max = beta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (norm, min, max)
}

/// Adapt `source` to `target`. Positives are relabeled and negatives mined
/// on the target images only; `train` supplies the mining, SGD and
/// calibration settings, `cfg` the adaptation constants.
pub fn adapt(source: &DpmModel, target: &Dataset, cfg: &AdaptConfig, train: &TrainConfig) -> Result<AdaptOutcome> {
    let (w_s, _) = vectorize(source);
    adapt_from(source, &w_s, target, cfg, train)
}

/// Adaptation towards the flat source vector `w_s`, starting the latent
/// rounds from `start` (which fixes the layout).
pub fn adapt_from(
    start: &DpmModel,
    w_s: &[f64],
    target: &Dataset,
    cfg: &AdaptConfig,
    train: &TrainConfig,
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    train.validate()?;
    start.validate()?;
    if target.is_empty() {
        return Err(Error::DataTooSmall { needed: 1, got: 0 });
    }
    let partition = StructurePartition::for_model(start, cfg.bias_grouping);
    if w_s.len() != partition.len {
        return Err(Error::Layout {
            expected: partition.len,
            actual: w_s.len(),
        });
    }
    if cfg.gamma == 0.0 {
        beta_closed_form(w_s, w_s, &partition, 0.0)?;
    }
    let mut beta = vec![1.0; partition.num_blocks()];
    let mut log = Vec::new();
    let rounds = cfg.rounds;
    let model = run_rounds(start.clone(), target, train, rounds, |round, w0, batch, bounds| {
        let mut w = w0.to_vec();
        let mut record = |step: &'static str, alternation: usize, w: &[f64], beta: &[f64]| -> Result<f64> {
            let j = objective(w, beta, w_s, &partition, &batch.samples, cfg.gamma, cfg.c)?;
            let (beta_norm, beta_min, beta_max) = beta_stats(beta);
            log.push(AdaptLogRow {
                round,
                alternation,
                step,
                objective: j,
                beta_norm,
                beta_min,
                beta_max,
                positives: batch.positives,
                negatives: batch.negatives,
            });
            Ok(j)
        };
        record("start", 0, &w, &beta)?;
        for alt in 0..cfg.alternations {
            let a = anchor(w_s, &beta, &partition);
            let salt = 1 + (round + alt * rounds) as u64;
            w = ssvm_sgd(&w, &a, &batch.samples, cfg.c, &train.sgd, bounds, salt)?.w;
            record("w", alt, &w, &beta)?;
            beta = beta_closed_form(&w, w_s, &partition, cfg.gamma)?;
            let j = record("beta", alt, &w, &beta)?;
            let (_, lo, hi) = beta_stats(&beta);
            info!(
                "adapt round {round}.{alt}: J {j:.6}, beta in [{lo:.3}, {hi:.3}], {} positives, {} negatives",
                batch.positives, batch.negatives
            );
        }
        Ok(w)
    })?;
    let mut model = model;
    model.threshold = calibrate_threshold(
        &model,
        target,
        &train.classes,
        train.calibration_images,
        train.calibration_fppi,
    )?;
    Ok(AdaptOutcome {
        model,
        beta,
        partition,
        log,
    })
}

/// One adapted model per repetition.
#[derive(Debug, Clone)]
pub struct Repetition {
    pub index: usize,
    pub subset_seed: u64,
    pub subset_size: usize,
    pub outcome: AdaptOutcome,
}

/// Adapt on `repetitions` random subsets holding a fraction `x` of the
/// target images. Subset `r` uses [`rng::repetition_seed`]`(cfg.seed, r)`.
pub fn run_repetitions(
    source: &DpmModel,
    target: &Dataset,
    x: f64,
    cfg: &AdaptConfig,
    train: &TrainConfig,
) -> Result<Vec<Repetition>> {
    cfg.validate()?;
    (0..cfg.repetitions)
        .map(|r| {
            let subset_seed = rng::repetition_seed(cfg.seed, r);
            let subset = subset_images(
                target,
                &SplitSpec {
                    fraction: x,
                    seed: subset_seed,
                },
            )?;
            info!("repetition {r}: {} target images", subset.len());
            Ok(Repetition {
                index: r,
                subset_seed,
                subset_size: subset.len(),
                outcome: adapt(source, &subset, cfg, train)?,
            })
        })
        .collect()
}
