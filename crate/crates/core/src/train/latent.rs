//! Latent positive relabeling and hard-negative mining.

use std::cmp::Ordering;

use log::warn;
use rayon::prelude::*;

use crate::data::{ClassSet, Dataset};
use crate::error::Result;
use crate::geometry::{iou, BBox, Detection};
use crate::hog::{build_pyramid, HogConfig, HogPyramid};
use crate::inference::{
    component_detections, placement_features, root_box, score_pyramid, DetectOptions, LevelScores, Placement,
};
use crate::model::DpmModel;

use super::sgd::Sample;

/// Best placement for one ground-truth box.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPositive {
    pub placement: Placement,
    pub score: f64,
}

/// For every target box, the highest-scoring (component, level, root
/// position) whose root box overlaps it by at least `overlap`. `None` when
/// no root placement overlaps enough.
pub fn latent_relabel(
    model: &DpmModel,
    pyramid: &HogPyramid,
    scores: &[LevelScores],
    targets: &[BBox],
    overlap: f64,
) -> Vec<Option<LatentPositive>> {
    let mut best: Vec<Option<(usize, usize, usize, usize, f64)>> = vec![None; targets.len()];
    for (li, ls) in scores.iter().enumerate() {
        for (ci, cs) in ls.components.iter().enumerate() {
            let root = &model.components[ci].root;
            let m = &cs.scores;
            for y in 0..m.rows() {
                for x in 0..m.cols() {
                    let s = m.get(y, x);
                    if !s.is_finite() {
                        continue;
                    }
                    let b = root_box(pyramid, ls.level, y, x, root.rows(), root.cols());
                    for (t, gt) in targets.iter().enumerate() {
                        if best[t].is_some_and(|bb| bb.4 >= s) {
                            continue;
                        }
                        if iou(&b, gt) >= overlap {
                            best[t] = Some((li, ci, y, x, s));
                        }
                    }
                }
            }
        }
    }
    best.into_iter()
        .map(|b| {
            b.map(|(li, ci, y, x, s)| LatentPositive {
                placement: Placement::from_scores(scores, li, ci, y, x),
                score: s,
            })
        })
        .collect()
}

fn placement_of(d: &Detection) -> Placement {
    Placement {
        level: d.level,
        component: d.component_id,
        root_y: d.root_y,
        root_x: d.root_x,
        parts: d.part_placements.iter().map(|p| (p.y, p.x)).collect(),
    }
}

/// Per component, detections scoring at least `threshold` that overlap every
/// box in `exclusions` by less than `max_overlap`, best first, at most
/// `limit` each. Components follow in model order.
pub fn mine_hard_negatives(
    model: &DpmModel,
    pyramid: &HogPyramid,
    scores: &[LevelScores],
    exclusions: &[BBox],
    threshold: f64,
    max_overlap: f64,
    limit: usize,
) -> Vec<(Placement, f64, BBox)> {
    let opts = DetectOptions {
        threshold: Some(threshold),
        nms_overlap: 0.5,
        max_detections: Some(limit + 8 * exclusions.len()),
    };
    (0..model.components.len())
        .flat_map(|ci| {
            component_detections(pyramid, model, scores, ci, &opts)
                .into_iter()
                .filter(|d| exclusions.iter().all(|e| iou(&d.bbox, e) < max_overlap))
                .take(limit)
        })
        .map(|d| (placement_of(&d), d.score, d.bbox))
        .collect()
}

/// Identifies a mined window so caches can deduplicate and order it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct WindowKey {
    pub image: usize,
    pub level: usize,
    pub component: usize,
    pub y: usize,
    pub x: usize,
}

#[derive(Debug, Clone)]
pub struct MinedNegative {
    pub key: WindowKey,
    pub score: f64,
    pub sample: Sample,
}

/// What one pass over the training images produced.
#[derive(Debug, Default)]
pub struct Harvest {
    pub positives: Vec<Sample>,
    pub positive_scores: Vec<f64>,
    pub dropped_positives: usize,
    pub negatives: Vec<MinedNegative>,
}

#[derive(Debug, Clone, Copy)]
pub struct HarvestOptions {
    pub positive_overlap: f64,
    pub negative_overlap: f64,
    pub mining_threshold: f64,
    pub negatives_per_image: usize,
    pub mine: bool,
}

/// Pyramid for training on `model`: built so the smallest root still fits.
pub fn model_pyramid(model: &DpmModel, image: &crate::raster::LumaImage, hog: &HogConfig) -> Result<HogPyramid> {
    let (r, c) = model.min_root_size();
    build_pyramid(image, hog, r, c)
}

/// Relabel positives and mine negatives in every image of `data`. Images
/// are processed in parallel; results are merged in image order.
pub fn harvest(model: &DpmModel, data: &Dataset, classes: &ClassSet, opts: &HarvestOptions) -> Result<Harvest> {
    let offsets = model.component_offsets();
    let per_image: Vec<Harvest> = data
        .entries
        .par_iter()
        .enumerate()
        .map(|(idx, entry)| -> Result<Harvest> {
            let image = entry.load_image()?;
            let pyramid = model_pyramid(model, &image, &model.hog)?;
            let scores = score_pyramid(model, &pyramid)?;
            let targets: Vec<BBox> = entry
                .annotations
                .iter()
                .filter(|a| classes.is_target(a))
                .map(|a| a.bbox)
                .collect();
            let mut h = Harvest::default();
            for lp in latent_relabel(model, &pyramid, &scores, &targets, opts.positive_overlap) {
                match lp {
                    Some(lp) => {
                        let phi = placement_features(model, &pyramid, &lp.placement);
                        h.positives.push(Sample::new(1.0, offsets[lp.placement.component], &phi));
                        h.positive_scores.push(lp.score);
                    }
                    None => h.dropped_positives += 1,
                }
            }
            if opts.mine {
                let exclusions: Vec<BBox> = entry.annotations.iter().map(|a| a.bbox).collect();
                for (p, score, _) in mine_hard_negatives(
                    model,
                    &pyramid,
                    &scores,
                    &exclusions,
                    opts.mining_threshold,
                    opts.negative_overlap,
                    opts.negatives_per_image,
                ) {
                    let phi = placement_features(model, &pyramid, &p);
                    h.negatives.push(MinedNegative {
                        key: WindowKey {
                            image: idx,
                            level: p.level,
                            component: p.component,
                            y: p.root_y,
                            x: p.root_x,
                        },
                        score,
                        sample: Sample::new(-1.0, offsets[p.component], &phi),
                    });
                }
            }
            Ok(h)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Harvest::default();
    for h in per_image {
        out.positives.extend(h.positives);
        out.positive_scores.extend(h.positive_scores);
        out.dropped_positives += h.dropped_positives;
        out.negatives.extend(h.negatives);
    }
    if out.dropped_positives > 0 {
        warn!(
            "{} positives had no root placement with overlap >= {} and were skipped",
            out.dropped_positives, opts.positive_overlap
        );
    }
    Ok(out)
}

/// Merge freshly mined negatives into the cache. Newer entries replace older
/// ones with the same window. Each of the `components` keeps at most an equal
/// share of `capacity`, filled with its highest scores under `w`; ties are
/// broken by window key.
pub fn update_cache(cache: &mut Vec<MinedNegative>, fresh: Vec<MinedNegative>, w: &[f64], capacity: usize, components: usize) {
    let mut by_key: std::collections::BTreeMap<WindowKey, MinedNegative> =
        cache.drain(..).map(|n| (n.key, n)).collect();
    for n in fresh {
        by_key.insert(n.key, n);
    }
    let mut all: Vec<MinedNegative> = by_key
        .into_values()
        .map(|mut n| {
            n.score = n.sample.dot(w);
            n
        })
        .collect();
    all.sort_by(|a, b| match b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal) {
        Ordering::Equal => a.key.cmp(&b.key),
        o => o,
    });
    let share = capacity / components.max(1);
    let last = components.max(1) - 1;
    let mut taken = vec![0usize; last + 1];
    all.retain(|n| {
        let t = &mut taken[n.key.component.min(last)];
        *t += 1;
        *t <= share
    });
    *cache = all;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hog::HogConfig;
    use crate::inference::score_pyramid;
    use crate::model::{fixtures, vectorize};
    use crate::raster::LumaImage;
    use crate::rng;

    fn scene() -> LumaImage {
        LumaImage::from_fn(96, 80, |x, y| {
            let inside = (30..70).contains(&x) && (25..50).contains(&y);
            (if inside { 200.0 } else { 40.0 }) + ((x * 13 + y * 7) % 11) as f64
        })
    }

    #[test]
    fn relabel_score_matches_feature_dot_product() {
        let mut r = rng::stream(21, 0);
        let mut model = fixtures::random_model(&mut r, 2, 2);
        model.hog = HogConfig {
            cell_size: 8,
            interval: 2,
        };
        let img = scene();
        let pyr = model_pyramid(&model, &img, &model.hog).unwrap();
        let scores = score_pyramid(&model, &pyr).unwrap();
        let gt = BBox::new(28.0, 22.0, 72.0, 52.0).unwrap();
        let out = latent_relabel(&model, &pyr, &scores, &[gt], 0.3);
        let lp = out[0].clone().expect("some root overlaps");
        let (w, _) = vectorize(&model);
        let off = model.component_offsets()[lp.placement.component];
        let phi = placement_features(&model, &pyr, &lp.placement);
        let dot: f64 = phi.iter().zip(&w[off..]).map(|(a, b)| a * b).sum();
        assert!((dot - lp.score).abs() < 1e-9);
        let c = &model.components[lp.placement.component].root;
        let b = root_box(&pyr, lp.placement.level, lp.placement.root_y, lp.placement.root_x, c.rows(), c.cols());
        assert!(iou(&b, &gt) >= 0.3);
    }

    #[test]
    fn unreachable_box_is_dropped() {
        let mut r = rng::stream(22, 0);
        let mut model = fixtures::random_model(&mut r, 1, 1);
        model.hog.interval = 2;
        let img = scene();
        let pyr = model_pyramid(&model, &img, &model.hog).unwrap();
        let scores = score_pyramid(&model, &pyr).unwrap();
        let tiny = BBox::new(0.0, 0.0, 3.0, 3.0).unwrap();
        assert_eq!(latent_relabel(&model, &pyr, &scores, &[tiny], 0.7), vec![None]);
    }

    #[test]
    fn mined_windows_avoid_ground_truth() {
        let mut r = rng::stream(23, 0);
        let mut model = fixtures::random_model(&mut r, 2, 2);
        model.hog.interval = 2;
        let img = scene();
        let pyr = model_pyramid(&model, &img, &model.hog).unwrap();
        let scores = score_pyramid(&model, &pyr).unwrap();
        let gt = BBox::new(28.0, 22.0, 72.0, 52.0).unwrap();
        let mined = mine_hard_negatives(&model, &pyr, &scores, &[gt], f64::NEG_INFINITY, 0.3, 50);
        assert!(!mined.is_empty());
        for (_, s, b) in &mined {
            assert!(iou(b, &gt) < 0.3);
            assert!(s.is_finite());
        }
        let comps: Vec<usize> = mined.iter().map(|(p, _, _)| p.component).collect();
        assert!(comps.windows(2).all(|c| c[0] <= c[1]));
        for c in 0..2 {
            assert!((1..=50).contains(&comps.iter().filter(|&&k| k == c).count()));
        }
        assert!(mined.windows(2).all(|w| w[0].0.component != w[1].0.component || w[0].1 >= w[1].1));
        let none = mine_hard_negatives(&model, &pyr, &scores, &[gt], f64::INFINITY, 0.3, 50);
        assert!(none.is_empty());
    }

    #[test]
    fn cache_keeps_hardest_and_deduplicates() {
        let neg = |image: usize, v: f64| neg_in(0, image, v);
        let mut cache = vec![neg(0, 1.0), neg(1, 3.0)];
        update_cache(&mut cache, vec![neg(1, 0.5), neg(2, 2.0)], &[1.0], 2, 1);
        let keys: Vec<usize> = cache.iter().map(|n| n.key.image).collect();
        assert_eq!(keys, vec![2, 0]);
    }

    #[test]
    fn cache_shares_capacity_across_components() {
        let fresh = vec![neg_in(0, 0, 5.0), neg_in(0, 1, 4.0), neg_in(0, 2, 3.0), neg_in(1, 3, -2.0)];
        let mut cache = Vec::new();
        update_cache(&mut cache, fresh, &[1.0], 4, 2);
        let keys: Vec<(usize, usize)> = cache.iter().map(|n| (n.key.component, n.key.image)).collect();
        assert_eq!(keys, vec![(0, 0), (0, 1), (1, 3)]);
    }

    fn neg_in(component: usize, image: usize, v: f64) -> MinedNegative {
        MinedNegative {
            key: WindowKey {
                image,
                level: 0,
                component,
                y: 0,
                x: 0,
            },
            score: 0.0,
            sample: Sample::new(-1.0, 0, &[v]),
        }
    }
}
