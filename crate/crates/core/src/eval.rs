//! FPPI / miss-rate evaluation with moderate and ignore handling.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::data::{ClassSet, Dataset};
use crate::error::{Error, Result};
use crate::geometry::{iou, Annotation, BBox};
use crate::hog::build_pyramid;
use crate::inference::{detect_in_pyramid, DetectOptions, DetectionRecord};
use crate::model::DpmModel;

/// Minimum overlap for a detection to count as hitting a box.
pub const MATCH_OVERLAP: f64 = 0.5;

/// FPPI values at which the log-average miss rate samples the curve.
pub fn log_average_grid() -> Vec<f64> {
    (0..9).map(|k| 10f64.powf(-2.0 + 0.25 * k as f64)).collect()
}

/// FPPI grid used to resample runs before averaging them.
pub fn aggregate_grid() -> Vec<f64> {
    (0..25).map(|k| 10f64.powf(-3.0 + 4.0 * k as f64 / 24.0)).collect()
}

/// Ground truth of one image split into scored and ignored boxes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImageGroundTruth {
    pub targets: Vec<BBox>,
    pub ignore: Vec<BBox>,
}

impl ImageGroundTruth {
    pub fn from_annotations(anns: &[Annotation], classes: &ClassSet) -> Self {
        let mut gt = Self::default();
        for a in anns {
            if classes.is_target(a) {
                gt.targets.push(a.bbox);
            } else if classes.is_ignore(a) {
                gt.ignore.push(a.bbox);
            }
        }
        gt
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchLabel {
    TruePositive,
    FalsePositive,
    Ignore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageMatch {
    /// One label per detection, in input order.
    pub labels: Vec<MatchLabel>,
    /// Whether each target box was found.
    pub found: Vec<bool>,
}

fn descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    idx
}

/// Greedy matching of one image's detections, best score first.
pub fn match_image(dets: &[(BBox, f64)], gt: &ImageGroundTruth) -> ImageMatch {
    let scores: Vec<f64> = dets.iter().map(|d| d.1).collect();
    let mut labels = vec![MatchLabel::FalsePositive; dets.len()];
    let mut found = vec![false; gt.targets.len()];
    for i in descending(&scores) {
        let b = &dets[i].0;
        let mut best: Option<(usize, f64)> = None;
        for (g, t) in gt.targets.iter().enumerate() {
            if found[g] {
                continue;
            }
            let o = iou(b, t);
            if o >= MATCH_OVERLAP && best.is_none_or(|(_, bo)| o > bo) {
                best = Some((g, o));
            }
        }
        labels[i] = if let Some((g, _)) = best {
            found[g] = true;
            MatchLabel::TruePositive
        } else if gt.ignore.iter().any(|t| iou(b, t) >= MATCH_OVERLAP) {
            MatchLabel::Ignore
        } else {
            MatchLabel::FalsePositive
        };
    }
    ImageMatch { labels, found }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FppiMrCurve {
    /// `(fppi, miss_rate)`, one point per distinct score threshold, FPPI ascending.
    pub points: Vec<(f64, f64)>,
    pub n_images: usize,
    pub n_gt: usize,
}

impl FppiMrCurve {
    /// Miss rate at `fppi`: the best operating point whose FPPI does not
    /// exceed it. Below the first point nothing is detected (MR 1); past the
    /// last point the curve is flat.
    pub fn miss_rate_at(&self, fppi: f64) -> f64 {
        let mut mr = 1.0;
        for &(f, m) in &self.points {
            if f <= fppi {
                mr = m;
            } else {
                break;
            }
        }
        mr
    }
}

/// Match every image and sweep the score threshold over all distinct scores.
pub fn curve(dets: &[Vec<(BBox, f64)>], gts: &[ImageGroundTruth]) -> Result<FppiMrCurve> {
    if dets.len() != gts.len() {
        return Err(Error::Shape(format!(
            "{} detection lists for {} images",
            dets.len(),
            gts.len()
        )));
    }
    if gts.is_empty() {
        return Err(Error::Config("evaluation needs at least one image".into()));
    }
    let n_gt: usize = gts.iter().map(|g| g.targets.len()).sum();
    if n_gt == 0 {
        return Err(Error::EmptyGroundTruth);
    }
    let matches: Vec<ImageMatch> = dets.par_iter().zip(gts).map(|(d, g)| match_image(d, g)).collect();
    let mut scored: Vec<(f64, bool)> = Vec::new();
    for (d, m) in dets.iter().zip(&matches) {
        for (det, l) in d.iter().zip(&m.labels) {
            match l {
                MatchLabel::TruePositive => scored.push((det.1, true)),
                MatchLabel::FalsePositive => scored.push((det.1, false)),
                MatchLabel::Ignore => {}
            }
        }
    }
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));
    let n_images = gts.len();
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (k, &(s, is_tp)) in scored.iter().enumerate() {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        if scored.get(k + 1).is_none_or(|n| n.0 != s) {
            points.push((fp as f64 / n_images as f64, 1.0 - tp as f64 / n_gt as f64));
        }
    }
    if points.is_empty() {
        points.push((0.0, 1.0));
    }
    Ok(FppiMrCurve { points, n_images, n_gt })
}

/// Geometric mean of the miss rate at 9 log-spaced FPPI values in [1e-2, 1].
pub fn log_average_mr(c: &FppiMrCurve) -> f64 {
    let grid = log_average_grid();
    let s: f64 = grid.iter().map(|&f| c.miss_rate_at(f).max(1e-10).ln()).sum();
    (s / grid.len() as f64).exp()
}

/// Arithmetic mean of the same 9 samples.
pub fn mean_mr(c: &FppiMrCurve) -> f64 {
    let grid = log_average_grid();
    grid.iter().map(|&f| c.miss_rate_at(f)).sum::<f64>() / grid.len() as f64
}

/// Score threshold whose operating point has the largest FPPI not above
/// `target`. Returns a value above every score when no such point exists.
pub fn threshold_at_fppi(dets: &[Vec<(BBox, f64)>], gts: &[ImageGroundTruth], target: f64) -> Result<f64> {
    let matches: Vec<ImageMatch> = dets.par_iter().zip(gts).map(|(d, g)| match_image(d, g)).collect();
    let mut scored: Vec<(f64, bool)> = Vec::new();
    for (d, m) in dets.iter().zip(&matches) {
        for (det, l) in d.iter().zip(&m.labels) {
            if *l != MatchLabel::Ignore {
                scored.push((det.1, *l == MatchLabel::FalsePositive));
            }
        }
    }
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));
    let n_images = gts.len().max(1) as f64;
    let mut best = scored.first().map_or(0.0, |s| s.0 + 1.0);
    let mut fp = 0usize;
    for (k, &(s, is_fp)) in scored.iter().enumerate() {
        fp += is_fp as usize;
        if scored.get(k + 1).is_none_or(|n| n.0 != s) {
            if fp as f64 / n_images > target {
                break;
            }
            best = s;
        }
    }
    Ok(best)
}

/// Detections of several models on every image of `data`, indexed
/// `[model][image]`. Models sharing a HOG configuration share one pyramid
/// per image.
pub fn detect_dataset(models: &[&DpmModel], data: &Dataset, opts: &DetectOptions) -> Result<Vec<Vec<Vec<(BBox, f64)>>>> {
    let per_image: Vec<Vec<Vec<(BBox, f64)>>> = data
        .entries
        .par_iter()
        .map(|e| -> Result<Vec<Vec<(BBox, f64)>>> {
            let image = e.load_image()?;
            let mut out: Vec<Vec<(BBox, f64)>> = vec![Vec::new(); models.len()];
            let mut done = vec![false; models.len()];
            for i in 0..models.len() {
                if done[i] {
                    continue;
                }
                let group: Vec<usize> = (i..models.len()).filter(|&j| !done[j] && models[j].hog == models[i].hog).collect();
                let rows = group.iter().map(|&j| models[j].min_root_size().0).min().unwrap_or(1);
                let cols = group.iter().map(|&j| models[j].min_root_size().1).min().unwrap_or(1);
                let pyramid = build_pyramid(&image, &models[i].hog, rows, cols)?;
                for j in group {
                    out[j] = detect_in_pyramid(&pyramid, models[j], opts)?
                        .into_iter()
                        .map(|d| (d.bbox, d.score))
                        .collect();
                    done[j] = true;
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut by_model = vec![Vec::with_capacity(data.len()); models.len()];
    for img in per_image {
        for (m, dets) in img.into_iter().enumerate() {
            by_model[m].push(dets);
        }
    }
    Ok(by_model)
}

/// Options used when scoring a detector for curves: no score cut-off, the
/// best `per_image` boxes after suppression.
pub fn evaluation_options(per_image: usize) -> DetectOptions {
    DetectOptions {
        threshold: Some(f64::NEG_INFINITY),
        nms_overlap: 0.5,
        max_detections: Some(per_image),
    }
}

pub fn ground_truth(data: &Dataset, classes: &ClassSet) -> Vec<ImageGroundTruth> {
    data.entries
        .iter()
        .map(|e| ImageGroundTruth::from_annotations(&e.annotations, classes))
        .collect()
}

/// FPPI / miss-rate curve of each model on `data`.
pub fn evaluate_models(models: &[&DpmModel], data: &Dataset, classes: &ClassSet, per_image: usize) -> Result<Vec<FppiMrCurve>> {
    let dets = detect_dataset(models, data, &evaluation_options(per_image))?;
    let gts = ground_truth(data, classes);
    dets.iter().map(|d| curve(d, &gts)).collect()
}

/// Group detection records by the image ids of `data`; records for unknown
/// images are an error.
pub fn group_records(records: &[DetectionRecord], data: &Dataset) -> Result<Vec<Vec<(BBox, f64)>>> {
    let index: std::collections::HashMap<String, usize> =
        data.entries.iter().enumerate().map(|(i, e)| (e.image_id(), i)).collect();
    let mut out = vec![Vec::new(); data.len()];
    for r in records {
        let i = index
            .get(&r.image_id)
            .ok_or_else(|| Error::Config(format!("detection for unknown image {}", r.image_id)))?;
        out[*i].push((r.bbox, r.score));
    }
    Ok(out)
}

/// Several runs of one experiment resampled on [`aggregate_grid`].
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateCurve {
    pub label: String,
    pub fppi: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub runs: Vec<Vec<f64>>,
    /// Log-average miss rate of each run.
    pub run_log_average: Vec<f64>,
    /// Arithmetic 9-point mean miss rate of each run.
    pub run_mean_mr: Vec<f64>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

impl AggregateCurve {
    /// Mean over runs of the per-run log-average miss rate (the legend value).
    pub fn log_average(&self) -> f64 {
        mean_std(&self.run_log_average).0
    }

    pub fn log_average_std(&self) -> f64 {
        mean_std(&self.run_log_average).1
    }

    pub fn mean_mr(&self) -> f64 {
        mean_std(&self.run_mean_mr).0
    }
}

pub fn aggregate(label: &str, curves: &[FppiMrCurve]) -> Result<AggregateCurve> {
    if curves.is_empty() {
        return Err(Error::Config("aggregate needs at least one run".into()));
    }
    let fppi = aggregate_grid();
    let runs: Vec<Vec<f64>> = curves
        .iter()
        .map(|c| fppi.iter().map(|&f| c.miss_rate_at(f)).collect())
        .collect();
    let (mut mean, mut std) = (Vec::new(), Vec::new());
    for k in 0..fppi.len() {
        let col: Vec<f64> = runs.iter().map(|r| r[k]).collect();
        let (m, s) = mean_std(&col);
        mean.push(m);
        std.push(s);
    }
    Ok(AggregateCurve {
        label: label.to_string(),
        fppi,
        mean,
        std,
        runs,
        run_log_average: curves.iter().map(log_average_mr).collect(),
        run_mean_mr: curves.iter().map(mean_mr).collect(),
    })
}

/// Per-experiment CSV: `fppi,mean_mr,std_mr,run_1..run_k`, followed by
/// `log_average_mr` and `mean_mr` rows holding the per-run summaries.
pub fn write_curve_csv<W: Write>(mut w: W, c: &AggregateCurve) -> Result<()> {
    write!(w, "fppi,mean_mr,std_mr")?;
    for r in 0..c.runs.len() {
        write!(w, ",run_{}", r + 1)?;
    }
    writeln!(w)?;
    for k in 0..c.fppi.len() {
        write!(w, "{},{},{}", c.fppi[k], c.mean[k], c.std[k])?;
        for r in &c.runs {
            write!(w, ",{}", r[k])?;
        }
        writeln!(w)?;
    }
    for (name, vals) in [("log_average_mr", &c.run_log_average), ("mean_mr", &c.run_mean_mr)] {
        let (m, s) = mean_std(vals);
        write!(w, "{name},{m},{s}")?;
        for v in vals.iter() {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_curve_csv<R: BufRead>(r: R, label: &str) -> Result<AggregateCurve> {
    let mut lines = r.lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty curve file".into()))??;
    let n_runs = header.split(',').count().checked_sub(3).ok_or_else(|| Error::Format("bad curve header".into()))?;
    let mut c = AggregateCurve {
        label: label.to_string(),
        fppi: vec![],
        mean: vec![],
        std: vec![],
        runs: vec![vec![]; n_runs],
        run_log_average: vec![],
        run_mean_mr: vec![],
    };
    for (i, line) in lines.enumerate() {
        let line = line?;
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != n_runs + 3 {
            return Err(Error::Parse {
                line: i + 2,
                message: format!("expected {} columns", n_runs + 3),
            });
        }
        let nums = |s: &[&str]| -> Result<Vec<f64>> {
            s.iter()
                .map(|v| {
                    v.parse::<f64>().map_err(|_| Error::Parse {
                        line: i + 2,
                        message: format!("not a number: {v:?}"),
                    })
                })
                .collect()
        };
        match cols[0] {
            "log_average_mr" => c.run_log_average = nums(&cols[3..])?,
            "mean_mr" => c.run_mean_mr = nums(&cols[3..])?,
            _ => {
                let v = nums(&cols)?;
                c.fppi.push(v[0]);
                c.mean.push(v[1]);
                c.std.push(v[2]);
                for (r, x) in c.runs.iter_mut().zip(&v[3..]) {
                    r.push(*x);
                }
            }
        }
    }
    Ok(c)
}

/// Raw operating points of one curve: an `n_images,n_gt` header row pair,
/// then `fppi,miss_rate` rows.
pub fn write_points_csv<W: Write>(mut w: W, c: &FppiMrCurve) -> Result<()> {
    writeln!(w, "n_images,n_gt")?;
    writeln!(w, "{},{}", c.n_images, c.n_gt)?;
    writeln!(w, "fppi,miss_rate")?;
    for (f, m) in &c.points {
        writeln!(w, "{f},{m}")?;
    }
    Ok(())
}

pub fn read_points_csv<R: BufRead>(r: R) -> Result<FppiMrCurve> {
    let bad = |line: usize, message: &str| Error::Parse {
        line,
        message: message.to_string(),
    };
    let lines: Vec<String> = r.lines().collect::<std::io::Result<_>>()?;
    if lines.len() < 3 || lines[0] != "n_images,n_gt" || lines[2] != "fppi,miss_rate" {
        return Err(bad(1, "missing curve header"));
    }
    let pair = |i: usize| -> Result<(String, String)> {
        let (a, b) = lines[i].split_once(',').ok_or_else(|| bad(i + 1, "expected two columns"))?;
        Ok((a.to_string(), b.to_string()))
    };
    let (ni, ng) = pair(1)?;
    let mut c = FppiMrCurve {
        points: Vec::new(),
        n_images: ni.parse().map_err(|_| bad(2, "bad image count"))?,
        n_gt: ng.parse().map_err(|_| bad(2, "bad ground-truth count"))?,
    };
    for i in 3..lines.len() {
        let (f, m) = pair(i)?;
        let f: f64 = f.parse().map_err(|_| bad(i + 1, "bad fppi"))?;
        let m: f64 = m.parse().map_err(|_| bad(i + 1, "bad miss rate"))?;
        c.points.push((f, m));
    }
    Ok(c)
}

/// Summary table: one row per experiment.
pub fn write_summary_csv<W: Write>(mut w: W, curves: &[AggregateCurve]) -> Result<()> {
    writeln!(w, "experiment,runs,log_average_mr,log_average_mr_std,mean_mr")?;
    for c in curves {
        writeln!(
            w,
            "{},{},{},{},{}",
            c.label,
            c.runs.len(),
            c.log_average(),
            c.log_average_std(),
            c.mean_mr()
        )?;
    }
    Ok(())
}

const PALETTE: [&str; 6] = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Log-log FPPI / miss-rate plot with a ±1 std band per experiment.
pub fn render_svg(title: &str, curves: &[AggregateCurve]) -> String {
    let (w, h) = (640.0, 480.0);
    let (x0, x1, y0, y1) = (70.0, 620.0, 40.0, 420.0);
    let (fmin, fmax) = (1e-3f64, 1e1f64);
    let (mmin, mmax) = (0.05f64, 1.0f64);
    let px = |f: f64| x0 + (f.max(fmin).log10() - fmin.log10()) / (fmax.log10() - fmin.log10()) * (x1 - x0);
    let py = |m: f64| {
        let m = m.clamp(mmin, mmax);
        y0 + (mmax.log10() - m.log10()) / (mmax.log10() - mmin.log10()) * (y1 - y0)
    };
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        (x0 + x1) / 2.0,
        xml_escape(title)
    );
    for e in -3..=1 {
        let x = px(10f64.powi(e));
        let _ = writeln!(
            s,
            r##"<line x1="{x:.2}" y1="{y0}" x2="{x:.2}" y2="{y1}" stroke="#ddd"/><text x="{x:.2}" y="{:.1}" text-anchor="middle">1e{e}</text>"##,
            y1 + 16.0
        );
    }
    for m in [0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.64, 0.8, 1.0] {
        let y = py(m);
        let _ = writeln!(
            s,
            r##"<line x1="{x0}" y1="{y:.2}" x2="{x1}" y2="{y:.2}" stroke="#ddd"/><text x="{:.1}" y="{:.2}" text-anchor="end">{m:.2}</text>"##,
            x0 - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<rect x="{x0}" y="{y0}" width="{:.1}" height="{:.1}" fill="none" stroke="black"/>"#,
        x1 - x0,
        y1 - y0
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">false positives per image</text>"#,
        (x0 + x1) / 2.0,
        h - 20.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">miss rate</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );
    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if c.runs.len() > 1 {
            let mut pts = String::new();
            for k in 0..c.fppi.len() {
                let _ = write!(pts, "{:.2},{:.2} ", px(c.fppi[k]), py(c.mean[k] - c.std[k]));
            }
            for k in (0..c.fppi.len()).rev() {
                let _ = write!(pts, "{:.2},{:.2} ", px(c.fppi[k]), py(c.mean[k] + c.std[k]));
            }
            let _ = writeln!(
                s,
                r#"<polygon points="{}" fill="{color}" fill-opacity="0.15" stroke="none"/>"#,
                pts.trim_end()
            );
        }
        let pts: Vec<String> = c
            .fppi
            .iter()
            .zip(&c.mean)
            .map(|(&f, &m)| format!("{:.2},{:.2}", px(f), py(m)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            pts.join(" ")
        );
        let ly = y0 + 18.0 + 18.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            x1 - 200.0,
            x1 - 180.0,
            x1 - 175.0,
            ly + 4.0,
            xml_escape(&legend_label(c))
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Legend text: log-average miss rate in percent followed by the label.
pub fn legend_label(c: &AggregateCurve) -> String {
    format!("{:.2}% {}", 100.0 * c.log_average(), c.label)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Write `<stem>_<label>.csv` per experiment, `<stem>_summary.csv` and `<stem>.svg`.
pub fn emit(dir: &Path, stem: &str, title: &str, curves: &[AggregateCurve]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for c in curves {
        let f = std::fs::File::create(dir.join(format!("{stem}_{}.csv", file_safe(&c.label))))?;
        write_curve_csv(std::io::BufWriter::new(f), c)?;
    }
    let f = std::fs::File::create(dir.join(format!("{stem}_summary.csv")))?;
    write_summary_csv(std::io::BufWriter::new(f), curves)?;
    std::fs::write(dir.join(format!("{stem}.svg")), render_svg(title, curves))?;
    Ok(())
}

pub fn file_safe(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}
