//! Scoring a DPM over a feature pyramid.
//!
//! Roots are correlated at their own level; parts are correlated one octave
//! finer, pushed through the distance transform, and read back at
//! `2 * root position + anchor`.

mod gdt;
mod nms;

use std::io::{BufRead, Write};

use rayon::prelude::*;

pub use gdt::{gdt, gdt_over, Axis, Transformed};
pub use nms::nms;

use crate::error::{Error, Result};
use crate::geometry::{BBox, Detection, PartPlacement};
use crate::hog::{build_pyramid, FeatureLevel, HogPyramid, FEATURE_DIM};
use crate::model::{Component, DpmModel, Filter};
use crate::raster::LumaImage;

/// A grid of scores aligned with a feature level.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    pub level: usize,
}

impl ScoreMap {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), rows * cols, "score map shape");
        Self {
            rows,
            cols,
            values,
            level: 0,
        }
    }

    pub fn empty() -> Self {
        Self::new(0, 0, Vec::new())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.cols + x]
    }

    #[inline]
    pub fn row(&self, y: usize) -> &[f64] {
        &self.values[y * self.cols..(y + 1) * self.cols]
    }
}

/// Dot product with eight independent accumulators (keeps the order fixed
/// while letting the compiler vectorize).
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Valid cross-correlation of a filter with a feature level (no padding).
/// A filter larger than the level yields an empty map.
pub fn correlate(filter: &Filter, level: &FeatureLevel) -> ScoreMap {
    if filter.rows() > level.rows() || filter.cols() > level.cols() {
        return ScoreMap::empty();
    }
    let out_rows = level.rows() - filter.rows() + 1;
    let out_cols = level.cols() - filter.cols() + 1;
    let span = filter.cols() * FEATURE_DIM;
    let mut values = vec![0.0; out_rows * out_cols];
    for y in 0..out_rows {
        let out = &mut values[y * out_cols..(y + 1) * out_cols];
        for i in 0..filter.rows() {
            let frow = filter.row(i);
            let lrow = level.row_span(y + i, 0, level.cols());
            for (x, o) in out.iter_mut().enumerate() {
                *o += dot(frow, &lrow[x * FEATURE_DIM..x * FEATURE_DIM + span]);
            }
        }
    }
    ScoreMap::new(out_rows, out_cols, values)
}

/// Scores of one component at one root level.
#[derive(Debug, Clone)]
pub struct ComponentScores {
    /// Total score per root position.
    pub scores: ScoreMap,
    /// Per part: deformed part score and best placement, indexed by root position.
    pub parts: Vec<Transformed>,
}

/// Score every root position of component `c` at `root_level`.
pub fn score_component(c: &Component, pyramid: &HogPyramid, root_level: usize) -> Result<ComponentScores> {
    if root_level < pyramid.interval || root_level >= pyramid.levels.len() {
        return Err(Error::LevelOutOfRange { level: root_level });
    }
    let mut scores = correlate(&c.root, &pyramid.levels[root_level]);
    scores.level = root_level;
    let (rows, cols) = (scores.rows(), scores.cols());
    if scores.is_empty() {
        return Ok(ComponentScores {
            scores,
            parts: Vec::new(),
        });
    }
    for v in scores.values.iter_mut() {
        *v += c.bias;
    }
    let part_level = &pyramid.levels[root_level - pyramid.interval];
    let mut parts = Vec::with_capacity(c.parts.len());
    for p in &c.parts {
        let raw = correlate(&p.filter, part_level);
        let t = gdt_over(
            &raw,
            &p.deformation,
            Axis {
                start: p.anchor_y,
                step: 2,
                len: rows,
            },
            Axis {
                start: p.anchor_x,
                step: 2,
                len: cols,
            },
        )?;
        for (v, d) in scores.values.iter_mut().zip(&t.values) {
            *v += d;
        }
        parts.push(t);
    }
    Ok(ComponentScores { scores, parts })
}

/// All component scores at one root level.
#[derive(Debug, Clone)]
pub struct LevelScores {
    pub level: usize,
    pub components: Vec<ComponentScores>,
}

/// Score every component at every root level of the pyramid.
pub fn score_pyramid(model: &DpmModel, pyramid: &HogPyramid) -> Result<Vec<LevelScores>> {
    pyramid
        .root_levels()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|level| {
            let components = model
                .components
                .iter()
                .map(|c| score_component(c, pyramid, level))
                .collect::<Result<Vec<_>>>()?;
            Ok(LevelScores { level, components })
        })
        .collect()
}

/// Image-space box of a root filter placed at `(y, x)` cells on `level`.
pub fn root_box(pyramid: &HogPyramid, level: usize, y: usize, x: usize, rows: usize, cols: usize) -> BBox {
    let l = &pyramid.levels[level];
    let cs = pyramid.cell_size as f64;
    let left = l.offset_x + x as f64 * cs / l.scale;
    let top = l.offset_y + y as f64 * cs / l.scale;
    let right = l.offset_x + (x + cols) as f64 * cs / l.scale;
    let bottom = l.offset_y + (y + rows) as f64 * cs / l.scale;
    BBox::new(left, top, right, bottom).expect("root filters have positive size")
}

/// A full latent configuration: component, root location and part placements.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Placement {
    pub level: usize,
    pub component: usize,
    pub root_y: usize,
    pub root_x: usize,
    /// `(y, x)` per part on the part level.
    pub parts: Vec<(i64, i64)>,
}

impl Placement {
    pub fn from_scores(scores: &[LevelScores], level_index: usize, component: usize, y: usize, x: usize) -> Self {
        let ls = &scores[level_index];
        let cs = &ls.components[component];
        Placement {
            level: ls.level,
            component,
            root_y: y,
            root_x: x,
            parts: cs.parts.iter().map(|t| t.arg(y, x)).collect(),
        }
    }
}

/// Feature vector of a placement, laid out like the component's block of the
/// flat parameter vector: root window, bias feature, then per part the window
/// and the negated displacement features `-(Δx, Δy, Δx², Δy²)`.
pub fn placement_features(model: &DpmModel, pyramid: &HogPyramid, p: &Placement) -> Vec<f64> {
    let c = &model.components[p.component];
    let mut phi = Vec::with_capacity(c.param_len());
    pyramid.levels[p.level].window_into(p.root_y, p.root_x, c.root.rows(), c.root.cols(), &mut phi);
    phi.push(1.0);
    let part_level = &pyramid.levels[p.level - pyramid.interval];
    for (spec, &(py, px)) in c.parts.iter().zip(&p.parts) {
        part_level.window_into(py as usize, px as usize, spec.filter.rows(), spec.filter.cols(), &mut phi);
        let ddx = (px - (2 * p.root_x as i64 + spec.anchor_x)) as f64;
        let ddy = (py - (2 * p.root_y as i64 + spec.anchor_y)) as f64;
        phi.extend_from_slice(&[-ddx, -ddy, -ddx * ddx, -ddy * ddy]);
    }
    phi
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectOptions {
    /// Score cut-off; `None` uses the model's threshold.
    pub threshold: Option<f64>,
    pub nms_overlap: f64,
    pub max_detections: Option<usize>,
}

impl Default for DetectOptions {
    fn default() -> Self {
        Self {
            threshold: None,
            nms_overlap: 0.5,
            max_detections: None,
        }
    }
}

/// Run the detector on an image.
pub fn detect(image: &LumaImage, model: &DpmModel, opts: &DetectOptions) -> Result<Vec<Detection>> {
    let (min_r, min_c) = model.min_root_size();
    let pyramid = build_pyramid(image, &model.hog, min_r, min_c)?;
    detect_in_pyramid(&pyramid, model, opts)
}

pub fn detect_in_pyramid(pyramid: &HogPyramid, model: &DpmModel, opts: &DetectOptions) -> Result<Vec<Detection>> {
    let scores = score_pyramid(model, pyramid)?;
    Ok(detections_from_scores(pyramid, model, &scores, opts))
}

/// Threshold, suppress and materialize detections from precomputed scores.
pub fn detections_from_scores(
    pyramid: &HogPyramid,
    model: &DpmModel,
    scores: &[LevelScores],
    opts: &DetectOptions,
) -> Vec<Detection> {
    select_detections(pyramid, model, scores, opts, None)
}

/// Like [`detections_from_scores`], restricted to one component.
pub fn component_detections(
    pyramid: &HogPyramid,
    model: &DpmModel,
    scores: &[LevelScores],
    component: usize,
    opts: &DetectOptions,
) -> Vec<Detection> {
    select_detections(pyramid, model, scores, opts, Some(component))
}

fn select_detections(
    pyramid: &HogPyramid,
    model: &DpmModel,
    scores: &[LevelScores],
    opts: &DetectOptions,
    only: Option<usize>,
) -> Vec<Detection> {
    let threshold = opts.threshold.unwrap_or(model.threshold);
    struct Cand {
        li: usize,
        comp: usize,
        y: usize,
        x: usize,
    }
    let mut cands = Vec::new();
    let mut cand_scores = Vec::new();
    for (li, ls) in scores.iter().enumerate() {
        for (ci, cs) in ls.components.iter().enumerate() {
            if only.is_some_and(|o| o != ci) {
                continue;
            }
            let m = &cs.scores;
            for y in 0..m.rows() {
                for (x, &s) in m.row(y).iter().enumerate() {
                    if s.is_finite() && s >= threshold {
                        cands.push(Cand { li, comp: ci, y, x });
                        cand_scores.push(s);
                    }
                }
            }
        }
    }
    let order = nms::by_descending_score(&cand_scores);
    let boxes: Vec<BBox> = order
        .iter()
        .map(|&i| {
            let c = &cands[i];
            let root = &model.components[c.comp].root;
            root_box(pyramid, scores[c.li].level, c.y, c.x, root.rows(), root.cols())
        })
        .collect();
    let keep = nms::greedy(&boxes, opts.nms_overlap, opts.max_detections);
    keep.into_iter()
        .map(|k| {
            let i = order[k];
            let c = &cands[i];
            let p = Placement::from_scores(scores, c.li, c.comp, c.y, c.x);
            Detection {
                bbox: boxes[k],
                score: cand_scores[i],
                component_id: c.comp,
                part_placements: p
                    .parts
                    .iter()
                    .enumerate()
                    .map(|(part, &(y, x))| PartPlacement { part, x, y })
                    .collect(),
                level: p.level,
                root_x: c.x,
                root_y: c.y,
            }
        })
        .collect()
}

/// One row of a detection dump.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionRecord {
    pub image_id: String,
    pub bbox: BBox,
    pub score: f64,
    pub component: usize,
}

pub const DETECTION_CSV_HEADER: &str = "image_id,left,top,right,bottom,score,component";

/// Write `image_id,left,top,right,bottom,score,component` rows.
pub fn write_detections_csv<W: Write>(mut w: W, records: &[DetectionRecord]) -> Result<()> {
    writeln!(w, "{DETECTION_CSV_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.image_id,
            r.bbox.left(),
            r.bbox.top(),
            r.bbox.right(),
            r.bbox.bottom(),
            r.score,
            r.component
        )?;
    }
    Ok(())
}

pub fn read_detections_csv<R: BufRead>(r: R) -> Result<Vec<DetectionRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        if line.trim().is_empty() || (i == 0 && line.starts_with("image_id")) {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 7 fields, got {}", f.len()),
            });
        }
        let num = |s: &str| -> Result<f64> {
            s.trim().parse::<f64>().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("not a number: {s:?}"),
            })
        };
        let bbox = BBox::new(num(f[1])?, num(f[2])?, num(f[3])?, num(f[4])?).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        out.push(DetectionRecord {
            image_id: f[0].to_string(),
            bbox,
            score: num(f[5])?,
            component: f[6].trim().parse().map_err(|_| Error::Parse {
                line: line_no,
                message: "bad component".into(),
            })?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hog::HogConfig;
    use crate::model::fixtures::{random_filter, random_model};
    use crate::model::{Deformation, PartSpec, PART_SIZE};
    use crate::rng;
    use rand::Rng;

    fn random_level(rng: &mut impl Rng, rows: usize, cols: usize) -> FeatureLevel {
        FeatureLevel::new(rows, cols, (0..rows * cols * FEATURE_DIM).map(|_| rng.gen_range(0.0..0.4)).collect()).unwrap()
    }

    #[test]
    fn correlate_matches_triple_loop() {
        let mut rng = rng::stream(21, 0);
        for _ in 0..20 {
            let level = random_level(&mut rng, 5, 7);
            let f = random_filter(&mut rng, 3, 3);
            let m = correlate(&f, &level);
            assert_eq!((m.rows(), m.cols()), (3, 5));
            for y in 0..3 {
                for x in 0..5 {
                    let mut s = 0.0;
                    for i in 0..3 {
                        for j in 0..3 {
                            for k in 0..FEATURE_DIM {
                                s += f.cell(i, j)[k] * level.cell(y + i, x + j)[k];
                            }
                        }
                    }
                    assert!((m.get(y, x) - s).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn correlate_degenerate_cases() {
        let mut rng = rng::stream(22, 0);
        let level = random_level(&mut rng, 4, 4);
        assert!(correlate(&Filter::zeros(2, 2), &level).values().iter().all(|&v| v == 0.0));
        assert!(correlate(&Filter::zeros(5, 1), &level).is_empty());
        let f = random_filter(&mut rng, 1, 1);
        let m = correlate(&f, &level);
        let expect: f64 = f.cell(0, 0).iter().zip(level.cell(2, 3)).map(|(a, b)| a * b).sum();
        assert!((m.get(2, 3) - expect).abs() < 1e-12);
    }

    fn pyramid_from_levels(levels: Vec<FeatureLevel>, interval: usize) -> HogPyramid {
        HogPyramid {
            levels,
            interval,
            cell_size: 8,
            image_width: 64,
            image_height: 64,
        }
    }

    #[test]
    fn component_score_matches_placement_features() {
        let mut rng = rng::stream(23, 0);
        let model = random_model(&mut rng, 2, 3);
        let pyr = pyramid_from_levels(vec![random_level(&mut rng, 16, 18), random_level(&mut rng, 8, 9)], 1);
        let scores = score_pyramid(&model, &pyr).unwrap();
        let (w, _) = crate::model::vectorize(&model);
        let offsets = model.component_offsets();
        for ci in 0..2 {
            let cs = &scores[0].components[ci];
            for y in 0..cs.scores.rows() {
                for x in 0..cs.scores.cols() {
                    let p = Placement::from_scores(&scores, 0, ci, y, x);
                    let phi = placement_features(&model, &pyr, &p);
                    let o = offsets[ci];
                    let s: f64 = phi.iter().zip(&w[o..o + phi.len()]).map(|(a, b)| a * b).sum();
                    assert!((s - cs.scores.get(y, x)).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn no_parts_is_root_plus_bias_and_bias_shifts() {
        let mut rng = rng::stream(24, 0);
        let mut model = random_model(&mut rng, 1, 0);
        let pyr = pyramid_from_levels(vec![random_level(&mut rng, 10, 10), random_level(&mut rng, 6, 7)], 1);
        let s0 = score_component(&model.components[0], &pyr, 1).unwrap();
        let root = correlate(&model.components[0].root, &pyr.levels[1]);
        for (a, b) in s0.scores.values().iter().zip(root.values()) {
            assert!((a - (b + model.components[0].bias)).abs() < 1e-12);
        }
        model.components[0].bias += 2.5;
        let s1 = score_component(&model.components[0], &pyr, 1).unwrap();
        for (a, b) in s0.scores.values().iter().zip(s1.scores.values()) {
            assert!((b - a - 2.5).abs() < 1e-12);
        }
        assert!(matches!(score_component(&model.components[0], &pyr, 0), Err(Error::LevelOutOfRange { .. })));
    }

    #[test]
    fn boundary_roots_remain_scoreable() {
        // anchor pushes the part window past the level edge for the last root column
        let mut rng = rng::stream(25, 0);
        let comp = Component {
            root: random_filter(&mut rng, 2, 2),
            parts: vec![PartSpec {
                filter: random_filter(&mut rng, PART_SIZE, PART_SIZE),
                anchor_x: 3,
                anchor_y: 0,
                deformation: Deformation::default(),
            }],
            bias: 0.0,
        };
        let pyr = pyramid_from_levels(vec![random_level(&mut rng, 8, 8), random_level(&mut rng, 4, 4)], 1);
        let s = score_component(&comp, &pyr, 1).unwrap();
        assert!(s.scores.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn blank_image_zero_model() {
        let img = LumaImage::filled(64, 64, 128.0);
        let mut model = random_model(&mut rng::stream(26, 0), 1, 0);
        model.hog = HogConfig {
            cell_size: 8,
            interval: 2,
        };
        let (w, p) = crate::model::vectorize(&model);
        model = crate::model::devectorize(&vec![0.0; w.len()], &p, &model).unwrap();
        let all = detect(
            &img,
            &model,
            &DetectOptions {
                threshold: Some(0.0),
                nms_overlap: 1.1,
                max_detections: None,
            },
        )
        .unwrap();
        let pyr = build_pyramid(&img, &model.hog, 3, 4).unwrap();
        let expected: usize = pyr
            .root_levels()
            .map(|l| (pyr.levels[l].rows() - 2) * (pyr.levels[l].cols() - 3))
            .sum();
        assert_eq!(all.len(), expected);
        let none = detect(
            &img,
            &model,
            &DetectOptions {
                threshold: Some(1e-9),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn detections_sorted_and_deterministic() {
        let mut rng = rng::stream(27, 0);
        let img = LumaImage::from_fn(96, 80, |_, _| rng.gen_range(0.0..255.0));
        let mut model = random_model(&mut rng::stream(28, 0), 2, 2);
        model.hog.interval = 2;
        let opts = DetectOptions {
            threshold: Some(f64::NEG_INFINITY),
            ..Default::default()
        };
        let a = detect(&img, &model, &opts).unwrap();
        let b = detect(&img, &model, &opts).unwrap();
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[0].score >= w[1].score));
        assert!(a.iter().all(|d| d.part_placements.len() == 2));
    }

    #[test]
    fn csv_round_trip() {
        let recs = vec![DetectionRecord {
            image_id: "000001".into(),
            bbox: BBox::new(1.5, 2.0, 30.25, 40.0).unwrap(),
            score: -0.125,
            component: 2,
        }];
        let mut buf = Vec::new();
        write_detections_csv(&mut buf, &recs).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with(DETECTION_CSV_HEADER));
        assert_eq!(read_detections_csv(&buf[..]).unwrap(), recs);
    }
}
