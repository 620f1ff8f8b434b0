//! Model initialization: aspect-ratio components, warped root features and
//! greedy part placement.

use log::warn;

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::hog::{compute_cells, HogConfig, FEATURE_DIM};
use crate::model::{Deformation, Filter, PartSpec, PART_SIZE};
use crate::raster::LumaImage;

/// Root shapes in cells and the component each positive belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentInit {
    pub shapes: Vec<(usize, usize)>,
    pub assignment: Vec<usize>,
    /// Median aspect ratio (width / height) of each group.
    pub aspect: Vec<f64>,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Split positives into `k` equal-count groups by aspect ratio and size one
/// root per group: the group's median aspect ratio at the area of its
/// `area_percentile` box, in cells, each side at least 3. Roots above
/// `max_cells` cells are shrunk keeping their aspect ratio.
pub fn init_components(
    boxes: &[BBox],
    k: usize,
    cell_size: usize,
    area_percentile: f64,
    max_cells: usize,
) -> Result<ComponentInit> {
    if k == 0 {
        return Err(Error::Config("need at least one component".into()));
    }
    if boxes.len() < k {
        return Err(Error::DataTooSmall {
            needed: k,
            got: boxes.len(),
        });
    }
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[a].aspect_ratio().total_cmp(&boxes[b].aspect_ratio()));
    let n = boxes.len();
    let mut assignment = vec![0; n];
    let mut shapes = Vec::with_capacity(k);
    let mut aspects = Vec::with_capacity(k);
    let cs2 = (cell_size * cell_size) as f64;
    for g in 0..k {
        let members = &order[g * n / k..(g + 1) * n / k];
        for &i in members {
            assignment[i] = g;
        }
        let ratios: Vec<f64> = members.iter().map(|&i| boxes[i].aspect_ratio()).collect();
        let aspect = median(&ratios);
        let mut areas: Vec<f64> = members.iter().map(|&i| boxes[i].area()).collect();
        areas.sort_by(f64::total_cmp);
        let idx = ((areas.len() - 1) as f64 * area_percentile).floor() as usize;
        let mut cells = areas[idx] / cs2;
        if cells > max_cells as f64 {
            cells = max_cells as f64;
        }
        let h = (cells / aspect).sqrt();
        let w = h * aspect;
        shapes.push(((h.round() as usize).max(3), (w.round() as usize).max(3)));
        aspects.push(aspect);
    }
    Ok(ComponentInit {
        shapes,
        assignment,
        aspect: aspects,
    })
}

/// HOG features of `bbox` warped onto a `rows x cols` cell grid. The crop
/// keeps one extra cell of context on each side so border cells see real
/// gradients; the context cells are dropped from the result.
pub fn warped_features(image: &LumaImage, bbox: &BBox, rows: usize, cols: usize, hog: &HogConfig) -> Result<Vec<f64>> {
    let cw = bbox.width() / cols as f64;
    let ch = bbox.height() / rows as f64;
    let cs = hog.cell_size;
    let crop = image.resample_region(
        bbox.left() - cw,
        bbox.top() - ch,
        bbox.right() + cw,
        bbox.bottom() + ch,
        (cols + 2) * cs,
        (rows + 2) * cs,
    );
    let level = compute_cells(&crop, hog)?;
    let mut out = Vec::with_capacity(rows * cols * FEATURE_DIM);
    level.window_into(1, 1, rows, cols, &mut out);
    Ok(out)
}

/// Bilinear 2x upsampling of a filter, channel by channel.
pub fn upsample2(f: &Filter) -> Filter {
    let (r, c) = (f.rows(), f.cols());
    let mut out = Filter::zeros(2 * r, 2 * c);
    let coord = |i: usize, n: usize| -> (usize, usize, f64) {
        let p = ((i as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = p.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        (lo, hi, p - lo as f64)
    };
    let w = out.weights_mut();
    for y in 0..2 * r {
        let (y0, y1, fy) = coord(y, r);
        for x in 0..2 * c {
            let (x0, x1, fx) = coord(x, c);
            let dst = &mut w[(y * 2 * c + x) * FEATURE_DIM..(y * 2 * c + x + 1) * FEATURE_DIM];
            for (k, d) in dst.iter_mut().enumerate() {
                let v00 = f.cell(y0, x0)[k];
                let v01 = f.cell(y0, x1)[k];
                let v10 = f.cell(y1, x0)[k];
                let v11 = f.cell(y1, x1)[k];
                *d = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11);
            }
        }
    }
    out
}

/// Greedily place up to `n_parts` disjoint `PART_SIZE x PART_SIZE` windows
/// on the doubled root, each maximizing the enclosed energy `Σ max(w, 0)²`.
/// Ties go to the first window in row-major order. When the doubled root
/// runs out of room fewer parts are returned.
pub fn init_parts(root: &Filter, n_parts: usize) -> Vec<PartSpec> {
    let up = upsample2(root);
    let (rows, cols) = (up.rows(), up.cols());
    let energy: Vec<f64> = (0..rows * cols)
        .map(|i| {
            up.weights()[i * FEATURE_DIM..(i + 1) * FEATURE_DIM]
                .iter()
                .map(|v| v.max(0.0).powi(2))
                .sum()
        })
        .collect();
    // summed-area table
    let mut sat = vec![0.0; (rows + 1) * (cols + 1)];
    for y in 0..rows {
        for x in 0..cols {
            sat[(y + 1) * (cols + 1) + x + 1] =
                energy[y * cols + x] + sat[y * (cols + 1) + x + 1] + sat[(y + 1) * (cols + 1) + x] - sat[y * (cols + 1) + x];
        }
    }
    let window = |y: usize, x: usize| -> f64 {
        let (y1, x1) = (y + PART_SIZE, x + PART_SIZE);
        sat[y1 * (cols + 1) + x1] - sat[y * (cols + 1) + x1] - sat[y1 * (cols + 1) + x] + sat[y * (cols + 1) + x]
    };
    let mut taken = vec![false; rows * cols];
    let mut parts = Vec::with_capacity(n_parts);
    while parts.len() < n_parts {
        let mut best: Option<(usize, usize, f64)> = None;
        if rows >= PART_SIZE && cols >= PART_SIZE {
            for y in 0..=rows - PART_SIZE {
                for x in 0..=cols - PART_SIZE {
                    let free = (y..y + PART_SIZE).all(|yy| (x..x + PART_SIZE).all(|xx| !taken[yy * cols + xx]));
                    if !free {
                        continue;
                    }
                    let e = window(y, x);
                    if best.is_none_or(|b| e > b.2) {
                        best = Some((y, x, e));
                    }
                }
            }
        }
        let Some((y, x, _)) = best else {
            warn!(
                "doubled root {rows}x{cols} holds only {} of {n_parts} parts",
                parts.len()
            );
            break;
        };
        for yy in y..y + PART_SIZE {
            for xx in x..x + PART_SIZE {
                taken[yy * cols + xx] = true;
            }
        }
        let mut w = Vec::with_capacity(PART_SIZE * PART_SIZE * FEATURE_DIM);
        for yy in y..y + PART_SIZE {
            w.extend_from_slice(&up.row(yy)[x * FEATURE_DIM..(x + PART_SIZE) * FEATURE_DIM]);
        }
        parts.push(PartSpec {
            filter: Filter::from_weights(PART_SIZE, PART_SIZE, w).expect("window has part size"),
            anchor_x: x as i64,
            anchor_y: y as i64,
            deformation: Deformation::default(),
        });
    }
    parts
}
