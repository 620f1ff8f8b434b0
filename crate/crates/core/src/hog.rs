//! HOG cell descriptors and the multi-scale feature pyramid.
//!
//! Each cell carries 31 values: 18 contrast-sensitive orientation channels,
//! 9 contrast-insensitive channels and 4 texture energies, one per 2x2
//! normalization block touching the cell.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::LumaImage;

pub const FEATURE_DIM: usize = 31;
const SIGNED_BINS: usize = 18;
const UNSIGNED_BINS: usize = 9;
const TRUNCATION: f64 = 0.2;
const NORM_EPS: f64 = 1e-4;
const TEXTURE_SCALE: f64 = 0.2357;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HogConfig {
    /// Cell side in pixels.
    pub cell_size: usize,
    /// Pyramid levels per octave.
    pub interval: usize,
}

impl Default for HogConfig {
    fn default() -> Self {
        Self {
            cell_size: 8,
            interval: 10,
        }
    }
}

impl HogConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cell_size < 2 {
            return Err(Error::Config(format!("cell_size {} < 2", self.cell_size)));
        }
        if self.interval < 1 {
            return Err(Error::Config("interval must be at least 1".into()));
        }
        Ok(())
    }
}

/// One grid of cell descriptors.
///
/// `scale` maps image pixels to level pixels; the level covers the image
/// region starting at `(offset_x, offset_y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLevel {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    pub scale: f64,
    pub offset_x: f64,
    pub offset_y: f64,
}

impl FeatureLevel {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols * FEATURE_DIM {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols}x{FEATURE_DIM} level",
                data.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            data,
            scale: 1.0,
            offset_x: 0.0,
            offset_y: 0.0,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols * FEATURE_DIM],
            scale: 1.0,
            offset_x: 0.0,
            offset_y: 0.0,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// The `FEATURE_DIM` values of cell `(y, x)`.
    #[inline]
    pub fn cell(&self, y: usize, x: usize) -> &[f64] {
        let o = (y * self.cols + x) * FEATURE_DIM;
        &self.data[o..o + FEATURE_DIM]
    }

    /// Contiguous features of `len` cells starting at `(y, x)`.
    #[inline]
    pub fn row_span(&self, y: usize, x: usize, len: usize) -> &[f64] {
        let o = (y * self.cols + x) * FEATURE_DIM;
        &self.data[o..o + len * FEATURE_DIM]
    }

    /// Copy the `h x w` window at `(y, x)` row-major into `out`.
    pub fn window_into(&self, y: usize, x: usize, h: usize, w: usize, out: &mut Vec<f64>) {
        for r in 0..h {
            out.extend_from_slice(self.row_span(y + r, x, w));
        }
    }

    /// Mirror left-right, permuting channels accordingly.
    pub fn flipped(&self) -> FeatureLevel {
        let perm = flip_permutation();
        let mut data = vec![0.0; self.data.len()];
        for y in 0..self.rows {
            for x in 0..self.cols {
                let src = self.cell(y, self.cols - 1 - x);
                let o = (y * self.cols + x) * FEATURE_DIM;
                for (k, &p) in perm.iter().enumerate() {
                    data[o + k] = src[p];
                }
            }
        }
        FeatureLevel {
            rows: self.rows,
            cols: self.cols,
            data,
            scale: self.scale,
            offset_x: self.offset_x,
            offset_y: self.offset_y,
        }
    }

    /// Debug dump: rows, cols, dim as little-endian i32, then row-major f32 values.
    pub fn write_dump<W: Write>(&self, mut w: W) -> Result<()> {
        for v in [self.rows, self.cols, FEATURE_DIM] {
            w.write_all(&(v as i32).to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    }
}

/// `perm[k]` is the channel of the unflipped cell that lands in channel `k`
/// after a horizontal flip. It is an involution.
pub fn flip_permutation() -> [usize; FEATURE_DIM] {
    let mut perm = [0usize; FEATURE_DIM];
    for (o, p) in perm.iter_mut().enumerate().take(SIGNED_BINS) {
        // angle t -> pi - t
        *p = (SIGNED_BINS + 9 - o) % SIGNED_BINS;
    }
    for u in 0..UNSIGNED_BINS {
        perm[SIGNED_BINS + u] = SIGNED_BINS + (UNSIGNED_BINS - u) % UNSIGNED_BINS;
    }
    // texture blocks: up-left, up-right, down-left, down-right
    let t = SIGNED_BINS + UNSIGNED_BINS;
    perm[t] = t + 1;
    perm[t + 1] = t;
    perm[t + 2] = t + 3;
    perm[t + 3] = t + 2;
    perm
}

/// Compute the cell grid of an image: `floor(h / cell) x floor(w / cell)` cells.
///
/// Gradients are centred differences with replicated borders; each pixel
/// votes its magnitude into the two nearest orientation bins and the four
/// nearest cells (both bilinearly).
pub fn compute_cells(image: &LumaImage, cfg: &HogConfig) -> Result<FeatureLevel> {
    cfg.validate()?;
    let cs = cfg.cell_size;
    let (w, h) = (image.width(), image.height());
    if w < 2 * cs || h < 2 * cs {
        return Err(Error::ImageTooSmall {
            width: w,
            height: h,
            cell_size: cs,
        });
    }
    let cols = w / cs;
    let rows = h / cs;
    let px_w = cols * cs;
    let px_h = rows * cs;
    let bin_width = 2.0 * std::f64::consts::PI / SIGNED_BINS as f64;

    let mut hist = vec![0.0f64; rows * cols * SIGNED_BINS];
    let data = image.data();
    for y in 0..px_h {
        let ym = y.saturating_sub(1);
        let yp = (y + 1).min(h - 1);
        let yc = (y as f64 + 0.5) / cs as f64 - 0.5;
        let iy = yc.floor() as i64;
        let fy = yc - iy as f64;
        for x in 0..px_w {
            let xm = x.saturating_sub(1);
            let xp = (x + 1).min(w - 1);
            let dx = data[y * w + xp] - data[y * w + xm];
            let dy = data[yp * w + x] - data[ym * w + x];
            let mag = (dx * dx + dy * dy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let mut theta = dy.atan2(dx);
            if theta < 0.0 {
                theta += 2.0 * std::f64::consts::PI;
            }
            let b = theta / bin_width;
            let b0f = b.floor();
            let fo = b - b0f;
            let b0 = (b0f as usize) % SIGNED_BINS;
            let b1 = (b0 + 1) % SIGNED_BINS;

            let xc = (x as f64 + 0.5) / cs as f64 - 0.5;
            let ix = xc.floor() as i64;
            let fx = xc - ix as f64;
            for (cy, wy) in [(iy, 1.0 - fy), (iy + 1, fy)] {
                if cy < 0 || cy >= rows as i64 || wy == 0.0 {
                    continue;
                }
                for (cx, wx) in [(ix, 1.0 - fx), (ix + 1, fx)] {
                    if cx < 0 || cx >= cols as i64 || wx == 0.0 {
                        continue;
                    }
                    let base = (cy as usize * cols + cx as usize) * SIGNED_BINS;
                    let v = mag * wy * wx;
                    hist[base + b0] += v * (1.0 - fo);
                    hist[base + b1] += v * fo;
                }
            }
        }
    }

    let energy: Vec<f64> = hist
        .chunks_exact(SIGNED_BINS)
        .map(|h| {
            (0..UNSIGNED_BINS)
                .map(|o| {
                    let s = h[o] + h[o + UNSIGNED_BINS];
                    s * s
                })
                .sum()
        })
        .collect();
    let e = |y: i64, x: i64| -> f64 {
        let yy = y.clamp(0, rows as i64 - 1) as usize;
        let xx = x.clamp(0, cols as i64 - 1) as usize;
        energy[yy * cols + xx]
    };

    let mut feats = vec![0.0; rows * cols * FEATURE_DIM];
    for y in 0..rows {
        for x in 0..cols {
            let (yi, xi) = (y as i64, x as i64);
            let block = |dy: i64, dx: i64| -> f64 {
                let s = e(yi + dy, xi + dx) + e(yi + dy, xi + dx + 1) + e(yi + dy + 1, xi + dx) + e(yi + dy + 1, xi + dx + 1);
                1.0 / (s + NORM_EPS).sqrt()
            };
            let norms = [block(-1, -1), block(-1, 0), block(0, -1), block(0, 0)];
            let h = &hist[(y * cols + x) * SIGNED_BINS..(y * cols + x + 1) * SIGNED_BINS];
            let out = &mut feats[(y * cols + x) * FEATURE_DIM..(y * cols + x + 1) * FEATURE_DIM];
            let mut texture = [0.0; 4];
            for o in 0..SIGNED_BINS {
                let mut sum = 0.0;
                for (k, n) in norms.iter().enumerate() {
                    let v = (h[o] * n).min(TRUNCATION);
                    sum += v;
                    texture[k] += v;
                }
                out[o] = 0.5 * sum;
            }
            for o in 0..UNSIGNED_BINS {
                let raw = h[o] + h[o + UNSIGNED_BINS];
                let sum: f64 = norms.iter().map(|n| (raw * n).min(TRUNCATION)).sum();
                out[SIGNED_BINS + o] = 0.5 * sum;
            }
            for (k, t) in texture.iter().enumerate() {
                out[SIGNED_BINS + UNSIGNED_BINS + k] = TEXTURE_SCALE * t;
            }
        }
    }
    FeatureLevel::new(rows, cols, feats)
}

/// Feature pyramid, fine to coarse. Level `l` has scale `2 * 2^(-l / interval)`,
/// so level 0 is the 2x upsampled image and level `l + interval` is exactly
/// one octave coarser than level `l`.
#[derive(Debug, Clone)]
pub struct HogPyramid {
    pub levels: Vec<FeatureLevel>,
    pub interval: usize,
    pub cell_size: usize,
    pub image_width: usize,
    pub image_height: usize,
}

pub fn level_scale(level: usize, interval: usize) -> f64 {
    2.0 * (2.0f64).powf(-(level as f64) / interval as f64)
}

impl HogPyramid {
    /// Levels that can host a root filter.
    pub fn root_levels(&self) -> std::ops::Range<usize> {
        self.interval.min(self.levels.len())..self.levels.len()
    }

    pub fn flipped(&self) -> HogPyramid {
        HogPyramid {
            levels: self.levels.iter().map(|l| l.flipped()).collect(),
            ..*self
        }
    }
}

/// Just the geometry of a pyramid, useful to plan work before computing features.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HogPyramidShape {
    pub rows: usize,
    pub cols: usize,
    pub scale: f64,
}

/// Cell-grid shapes of the pyramid levels for an image, stopping at the first
/// level smaller than `min_rows x min_cols` cells. The levels of one octave
/// chain (`l`, `l + interval`, ...) cover the same centred region: whole cells
/// of the chain's coarsest level, padded past the image border. A part level
/// therefore has exactly twice the cells of its root level in each direction.
pub fn pyramid_shape(
    width: usize,
    height: usize,
    cfg: &HogConfig,
    min_rows: usize,
    min_cols: usize,
) -> Vec<HogPyramidShape> {
    let cs = cfg.cell_size as f64;
    let cells = |extent: usize, scale: f64| extent as f64 * scale / cs;
    let n = (0..)
        .take_while(|&l| {
            let scale = level_scale(l, cfg.interval);
            cells(height, scale).floor() as usize >= min_rows.max(2) && cells(width, scale).floor() as usize >= min_cols.max(2)
        })
        .count();
    (0..n)
        .map(|l| {
            let octaves = (n - 1 - l) / cfg.interval;
            let coarsest = level_scale(l + octaves * cfg.interval, cfg.interval);
            let padded = |extent: usize| ((cells(extent, coarsest) - 1e-9).ceil() as usize) << octaves;
            HogPyramidShape {
                rows: padded(height),
                cols: padded(width),
                scale: level_scale(l, cfg.interval),
            }
        })
        .collect()
}

/// Build the pyramid down to the last level that still fits a
/// `min_rows x min_cols` root filter. Each level resamples the centred region
/// of [`pyramid_shape`], so the scale is exact; samples past the image border
/// repeat it.
pub fn build_pyramid(
    image: &LumaImage,
    cfg: &HogConfig,
    min_rows: usize,
    min_cols: usize,
) -> Result<HogPyramid> {
    cfg.validate()?;
    let shapes = pyramid_shape(image.width(), image.height(), cfg, min_rows, min_cols);
    let cs = cfg.cell_size;
    let levels = shapes
        .par_iter()
        .map(|s| {
            let span_w = (s.cols * cs) as f64 / s.scale;
            let span_h = (s.rows * cs) as f64 / s.scale;
            let ox = (image.width() as f64 - span_w) / 2.0;
            let oy = (image.height() as f64 - span_h) / 2.0;
            let resampled = image.resample_region(ox, oy, ox + span_w, oy + span_h, s.cols * cs, s.rows * cs);
            let mut level = compute_cells(&resampled, cfg)?;
            level.scale = s.scale;
            level.offset_x = ox;
            level.offset_y = oy;
            Ok(level)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HogPyramid {
        levels,
        interval: cfg.interval,
        cell_size: cs,
        image_width: image.width(),
        image_height: image.height(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> HogConfig {
        HogConfig {
            cell_size: 8,
            interval: 10,
        }
    }

    #[test]
    fn constant_image_has_zero_features() {
        let level = compute_cells(&LumaImage::filled(32, 24, 77.0), &cfg()).unwrap();
        assert!(level.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grid_size_is_floor_of_cells() {
        let level = compute_cells(&LumaImage::filled(64, 48, 1.0), &cfg()).unwrap();
        assert_eq!((level.rows(), level.cols()), (6, 8));
    }

    #[test]
    fn too_small_is_rejected() {
        let r = compute_cells(&LumaImage::filled(15, 40, 1.0), &cfg());
        assert!(matches!(r, Err(Error::ImageTooSmall { .. })));
    }

    #[test]
    fn vertical_step_votes_horizontal_gradient_bin() {
        // dark left half, bright right half: gradient points along +x (angle 0)
        let img = LumaImage::from_fn(16, 16, |x, _| if x < 8 { 0.0 } else { 200.0 });
        let level = compute_cells(&img, &cfg()).unwrap();
        for y in 0..2 {
            for x in 0..2 {
                let c = level.cell(y, x);
                let best = (0..SIGNED_BINS).max_by(|&a, &b| c[a].partial_cmp(&c[b]).unwrap()).unwrap();
                assert_eq!(best, 0);
                assert!(c[0] > 0.0);
                for o in 1..SIGNED_BINS {
                    assert_eq!(c[o], 0.0, "bin {o}");
                }
                assert!(c[SIGNED_BINS] > 0.0);
            }
        }
    }

    #[test]
    fn features_are_bounded_and_finite() {
        let img = LumaImage::from_fn(48, 40, |x, y| (((x * 7919) ^ (y * 104729)) % 256) as f64);
        let level = compute_cells(&img, &cfg()).unwrap();
        let bound = TEXTURE_SCALE * SIGNED_BINS as f64 * TRUNCATION;
        assert!(level.data().iter().all(|v| v.is_finite() && *v >= 0.0 && *v <= bound + 1e-12));
    }

    #[test]
    fn flip_permutation_is_involution() {
        let p = flip_permutation();
        for k in 0..FEATURE_DIM {
            assert_eq!(p[p[k]], k);
        }
    }

    #[test]
    fn flipping_image_permutes_features() {
        let img = LumaImage::from_fn(40, 32, |x, y| ((x * 13 + y * y * 3 + x * y) % 97) as f64);
        let a = compute_cells(&img.flip_horizontal(), &cfg()).unwrap();
        let b = compute_cells(&img, &cfg()).unwrap().flipped();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-9, "{p} vs {q}");
        }
    }

    #[test]
    fn pyramid_scales_halve_per_octave() {
        let img = LumaImage::from_fn(128, 64, |x, y| ((x * y) % 31) as f64);
        let c = HogConfig {
            cell_size: 8,
            interval: 1,
        };
        let pyr = build_pyramid(&img, &c, 2, 2).unwrap();
        for pair in pyr.levels.windows(2) {
            assert!((pair[1].scale / pair[0].scale - 0.5).abs() < 1e-12);
            assert_eq!((pair[0].rows(), pair[0].cols()), (2 * pair[1].rows(), 2 * pair[1].cols()));
            assert_eq!((pair[0].offset_x, pair[0].offset_y), (pair[1].offset_x, pair[1].offset_y));
        }
        assert_eq!((pyr.levels[0].rows(), pyr.levels[0].cols()), (16, 32));
    }

    #[test]
    fn pyramid_level_zero_is_double_resolution() {
        let shapes = pyramid_shape(640, 480, &cfg(), 3, 3);
        assert_eq!(shapes[0].scale, 2.0);
        assert!(shapes[0].rows >= 120 && shapes[0].cols >= 160);
        for l in 0..shapes.len() - 10 {
            let (fine, coarse) = (shapes[l], shapes[l + 10]);
            assert!((coarse.scale / fine.scale - 0.5).abs() < 1e-12);
            assert_eq!((fine.rows, fine.cols), (2 * coarse.rows, 2 * coarse.cols));
        }
        for s in &shapes {
            assert!(s.rows as f64 >= 480.0 * s.scale / 8.0 - 1e-9 && s.cols as f64 >= 640.0 * s.scale / 8.0 - 1e-9);
        }
        // deterministic level count
        assert_eq!(shapes.len(), pyramid_shape(640, 480, &cfg(), 3, 3).len());
    }

    #[test]
    fn dump_layout() {
        let level = FeatureLevel::zeros(2, 3);
        let mut buf = Vec::new();
        level.write_dump(&mut buf).unwrap();
        assert_eq!(buf.len(), 12 + 2 * 3 * FEATURE_DIM * 4);
        assert_eq!(&buf[0..4], &2i32.to_le_bytes());
        assert_eq!(&buf[8..12], &31i32.to_le_bytes());
    }
}
