//! Latent SVM training of a DPM from annotated images.
//!
//! The pipeline: split positives into components by aspect ratio, train
//! each root on warped positives against random background windows, place
//! parts on the doubled roots, then alternate latent relabeling, hard-negative
//! mining and SGD for a fixed number of rounds.

mod init;
mod latent;
mod sgd;

use std::io::Write;

use log::info;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use init::{init_components, init_parts, upsample2, warped_features, ComponentInit};
pub use latent::{
    harvest, latent_relabel, mine_hard_negatives, model_pyramid, update_cache, Harvest, HarvestOptions,
    LatentPositive, MinedNegative, WindowKey,
};
pub use sgd::{hinge_sum, objective, ssvm_sgd, subgradient, training_error, EpochStats, Sample, SgdConfig, SgdOutcome};

use crate::data::{ClassSet, Dataset};
use crate::error::{Error, Result};
use crate::eval::{threshold_at_fppi, ImageGroundTruth};
use crate::geometry::{iou, BBox};
use crate::hog::HogConfig;
use crate::inference::{detections_from_scores, score_pyramid, DetectOptions};
use crate::model::{devectorize, vectorize, Component, DpmModel, Filter, MIN_QUADRATIC_DEFORMATION};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub components: usize,
    pub parts_per_component: usize,
    #[serde(rename = "C")]
    pub c: f64,
    pub sgd: SgdConfig,
    /// Maximum number of hard negatives kept between rounds, shared equally
    /// by the components.
    pub neg_cache: usize,
    pub relabel_rounds: usize,
    pub hog: HogConfig,
    /// Minimum root overlap for a latent positive placement.
    pub positive_overlap: f64,
    /// Mined negatives overlap every annotated box by less than this.
    pub negative_overlap: f64,
    pub mining_threshold: f64,
    /// Hard negatives mined per image and component.
    pub negatives_per_image: usize,
    /// Random background windows per image and component for root training.
    pub random_negatives_per_image: usize,
    /// Root area is taken from this percentile of the component's box areas.
    pub root_area_percentile: f64,
    pub max_root_cells: usize,
    /// Images used to calibrate the operating threshold.
    pub calibration_images: usize,
    pub calibration_fppi: f64,
    /// Mine in every round; when false negatives are mined once and frozen.
    pub mine_every_round: bool,
    pub classes: ClassSet,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            components: 3,
            parts_per_component: 8,
            c: 0.001,
            sgd: SgdConfig::default(),
            neg_cache: 20000,
            relabel_rounds: 3,
            hog: HogConfig::default(),
            positive_overlap: 0.7,
            negative_overlap: 0.3,
            mining_threshold: -1.0,
            negatives_per_image: 50,
            random_negatives_per_image: 4,
            root_area_percentile: 0.2,
            max_root_cells: 200,
            calibration_images: 50,
            calibration_fppi: 1.0,
            mine_every_round: true,
            classes: ClassSet::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.components == 0 || self.parts_per_component == 0 || self.relabel_rounds == 0 {
            return Err(Error::Config("component, part and round counts must be at least 1".into()));
        }
        if !(self.c > 0.0) {
            return Err(Error::Config(format!("C must be positive, got {}", self.c)));
        }
        self.hog.validate()
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRow {
    pub stage: String,
    pub epoch: usize,
    pub objective: f64,
    pub positives: usize,
    pub negatives: usize,
    pub train_error: f64,
}

pub const TRAIN_LOG_HEADER: &str = "stage,epoch,objective,positives,negatives,train_error";

pub fn write_train_log<W: Write>(mut w: W, rows: &[TrainLogRow]) -> Result<()> {
    writeln!(w, "{TRAIN_LOG_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.stage, r.epoch, r.objective, r.positives, r.negatives, r.train_error
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: DpmModel,
    pub log: Vec<TrainLogRow>,
}

/// Indices of the quadratic deformation weights, which must stay positive.
pub fn deformation_bounds(model: &DpmModel) -> Vec<(usize, f64)> {
    let mut out = Vec::new();
    let mut off = 0;
    for c in &model.components {
        off += c.root.len() + 1;
        for p in &c.parts {
            off += p.filter.len();
            out.push((off + 2, MIN_QUADRATIC_DEFORMATION));
            out.push((off + 3, MIN_QUADRATIC_DEFORMATION));
            off += 4;
        }
    }
    out
}

fn push_epochs(log: &mut Vec<TrainLogRow>, stage: &str, out: &SgdOutcome, pos: usize, neg: usize) {
    for e in &out.epochs {
        log.push(TrainLogRow {
            stage: stage.to_string(),
            epoch: e.epoch,
            objective: e.objective,
            positives: pos,
            negatives: neg,
            train_error: e.train_error,
        });
    }
}

fn random_window(rng: &mut rng::Rng, w: usize, h: usize, aspect: f64, min_h: f64) -> Option<BBox> {
    let max_h = (h as f64).min(w as f64 / aspect);
    if max_h < min_h {
        return None;
    }
    let bh = rng.gen_range(min_h..=max_h);
    let bw = bh * aspect;
    let x = rng.gen_range(0.0..=(w as f64 - bw).max(0.0));
    let y = rng.gen_range(0.0..=(h as f64 - bh).max(0.0));
    BBox::new(x, y, x + bw, y + bh).ok()
}

/// Warped-positive / random-negative samples for root pretraining.
fn root_samples(data: &Dataset, init: &ComponentInit, offsets: &[usize], cfg: &TrainConfig) -> Result<Vec<Sample>> {
    let mut next = 0usize;
    let starts: Vec<usize> = data
        .entries
        .iter()
        .map(|e| {
            let s = next;
            next += e.annotations.iter().filter(|a| cfg.classes.is_target(a)).count();
            s
        })
        .collect();
    let per_image: Vec<Vec<Sample>> = data
        .entries
        .par_iter()
        .enumerate()
        .map(|(idx, entry)| -> Result<Vec<Sample>> {
            let image = entry.load_image()?;
            let mut out = Vec::new();
            let targets = entry.annotations.iter().filter(|a| cfg.classes.is_target(a));
            for (k, a) in targets.enumerate() {
                let comp = init.assignment[starts[idx] + k];
                let (rows, cols) = init.shapes[comp];
                let mut phi = warped_features(&image, &a.bbox, rows, cols, &cfg.hog)?;
                phi.push(1.0);
                out.push(Sample::new(1.0, offsets[comp], &phi));
            }
            let mut r = rng::stream(rng::derive_seed(cfg.sgd.seed, idx as u64), rng::streams::RANDOM_NEGATIVES);
            let exclusions: Vec<BBox> = entry.annotations.iter().map(|a| a.bbox).collect();
            for (comp, &(rows, cols)) in init.shapes.iter().enumerate() {
                let aspect = cols as f64 / rows as f64;
                let min_h = (rows * cfg.hog.cell_size) as f64 / 2.0;
                let mut made = 0;
                for _ in 0..cfg.random_negatives_per_image * 10 {
                    if made == cfg.random_negatives_per_image {
                        break;
                    }
                    let Some(b) = random_window(&mut r, image.width(), image.height(), aspect, min_h) else {
                        break;
                    };
                    if exclusions.iter().any(|e| iou(&b, e) >= cfg.negative_overlap) {
                        continue;
                    }
                    let mut phi = warped_features(&image, &b, rows, cols, &cfg.hog)?;
                    phi.push(1.0);
                    out.push(Sample::new(-1.0, offsets[comp], &phi));
                    made += 1;
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_image.into_iter().flatten().collect())
}

/// Target boxes of a dataset in entry order.
fn target_boxes(data: &Dataset, classes: &ClassSet) -> Vec<BBox> {
    data.entries
        .iter()
        .flat_map(|e| e.annotations.iter().filter(|a| classes.is_target(a)).map(|a| a.bbox))
        .collect()
}

/// Initial model: trained roots with greedily placed parts.
pub fn initial_model(data: &Dataset, cfg: &TrainConfig, log: &mut Vec<TrainLogRow>) -> Result<DpmModel> {
    let boxes = target_boxes(data, &cfg.classes);
    let init = init_components(
        &boxes,
        cfg.components,
        cfg.hog.cell_size,
        cfg.root_area_percentile,
        cfg.max_root_cells,
    )?;
    info!("root shapes {:?}", init.shapes);
    let roots_only = DpmModel {
        components: init
            .shapes
            .iter()
            .map(|&(r, c)| Component {
                root: Filter::zeros(r, c),
                parts: vec![],
                bias: 0.0,
            })
            .collect(),
        hog: cfg.hog,
        threshold: 0.0,
    };
    let offsets = roots_only.component_offsets();
    let samples = root_samples(data, &init, &offsets, cfg)?;
    let (w0, partition) = vectorize(&roots_only);
    let anchor = vec![0.0; w0.len()];
    let out = ssvm_sgd(&w0, &anchor, &samples, cfg.c, &cfg.sgd, &[], 0)?;
    let n_pos = samples.iter().filter(|s| s.label > 0.0).count();
    push_epochs(log, "root", &out, n_pos, samples.len() - n_pos);
    let roots = devectorize(&out.w, &partition, &roots_only)?;
    Ok(DpmModel {
        components: roots
            .components
            .into_iter()
            .map(|c| Component {
                parts: init_parts(&c.root, cfg.parts_per_component),
                ..c
            })
            .collect(),
        ..roots
    })
}

/// Samples gathered for one latent round.
#[derive(Debug, Clone)]
pub struct RoundSamples {
    pub samples: Vec<Sample>,
    pub positives: usize,
    pub negatives: usize,
}

/// Run `rounds` latent rounds from `model`: relabel the positives and mine
/// negatives with the current model, then let `solve` produce the next flat
/// parameter vector. While the negative cache is empty, mining takes the
/// best-scoring background windows regardless of the mining threshold.
pub fn run_rounds<F>(mut model: DpmModel, data: &Dataset, cfg: &TrainConfig, rounds: usize, mut solve: F) -> Result<DpmModel>
where
    F: FnMut(usize, &[f64], &RoundSamples, &[(usize, f64)]) -> Result<Vec<f64>>,
{
    let mut cache: Vec<MinedNegative> = Vec::new();
    let bounds = deformation_bounds(&model);
    for round in 0..rounds {
        let (w, partition) = vectorize(&model);
        let mine = cfg.mine_every_round || round == 0;
        let h = harvest(
            &model,
            data,
            &cfg.classes,
            &HarvestOptions {
                positive_overlap: cfg.positive_overlap,
                negative_overlap: cfg.negative_overlap,
                mining_threshold: if cache.is_empty() {
                    f64::NEG_INFINITY
                } else {
                    cfg.mining_threshold
                },
                negatives_per_image: cfg.negatives_per_image,
                mine,
            },
        )?;
        if h.positives.is_empty() {
            return Err(Error::DataTooSmall { needed: 1, got: 0 });
        }
        if mine {
            update_cache(&mut cache, h.negatives, &w, cfg.neg_cache, model.components.len());
        }
        let positives = h.positives.len();
        let mut samples = h.positives;
        samples.extend(cache.iter().map(|n| n.sample.clone()));
        let batch = RoundSamples {
            samples,
            positives,
            negatives: cache.len(),
        };
        let next = solve(round, &w, &batch, &bounds)?;
        model = devectorize(&next, &partition, &model)?;
    }
    Ok(model)
}

/// Latent training rounds starting from `model`.
pub fn latent_rounds(model: DpmModel, data: &Dataset, cfg: &TrainConfig, log: &mut Vec<TrainLogRow>) -> Result<DpmModel> {
    run_rounds(model, data, cfg, cfg.relabel_rounds, |round, w, batch, bounds| {
        let anchor = vec![0.0; w.len()];
        let out = ssvm_sgd(w, &anchor, &batch.samples, cfg.c, &cfg.sgd, bounds, 1 + round as u64)?;
        info!(
            "round {round}: {} positives, {} negatives, objective {:.6}",
            batch.positives, batch.negatives, out.objective
        );
        push_epochs(log, &format!("round{}", round + 1), &out, batch.positives, batch.negatives);
        Ok(out.w)
    })
}

/// Calibrate `model.threshold` to the requested FPPI on an evenly spaced
/// slice of `data`.
pub fn calibrate_threshold(model: &DpmModel, data: &Dataset, classes: &ClassSet, n_images: usize, fppi: f64) -> Result<f64> {
    let n = data.len().min(n_images.max(1));
    let picks: Vec<usize> = (0..n).map(|i| i * data.len() / n).collect();
    let opts = DetectOptions {
        threshold: Some(f64::NEG_INFINITY),
        nms_overlap: 0.5,
        max_detections: Some(100),
    };
    let per_image: Vec<(Vec<(BBox, f64)>, ImageGroundTruth)> = picks
        .par_iter()
        .map(|&i| -> Result<_> {
            let e = &data.entries[i];
            let image = e.load_image()?;
            let pyr = model_pyramid(model, &image, &model.hog)?;
            let scores = score_pyramid(model, &pyr)?;
            let dets = detections_from_scores(&pyr, model, &scores, &opts)
                .into_iter()
                .map(|d| (d.bbox, d.score))
                .collect();
            Ok((dets, ImageGroundTruth::from_annotations(&e.annotations, classes)))
        })
        .collect::<Result<Vec<_>>>()?;
    let (dets, gts): (Vec<_>, Vec<_>) = per_image.into_iter().unzip();
    threshold_at_fppi(&dets, &gts, fppi)
}

/// Full training pipeline.
pub fn train(data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut log = Vec::new();
    let model = initial_model(data, cfg, &mut log)?;
    let mut model = latent_rounds(model, data, cfg, &mut log)?;
    model.threshold = calibrate_threshold(&model, data, &cfg.classes, cfg.calibration_images, cfg.calibration_fppi)?;
    Ok(TrainOutcome { model, log })
}
