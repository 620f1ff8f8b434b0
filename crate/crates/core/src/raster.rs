//! Single-channel luma images and the resampling used by the feature pyramid.

use std::path::Path;

use crate::error::{Error, Result};

/// Row-major luma image with intensities nominally in `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LumaImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl LumaImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "{} pixels for a {width}x{height} image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    /// Converts any decoded raster to luma with `0.299 R + 0.587 G + 0.114 B`.
    pub fn from_dynamic(img: &image::DynamicImage) -> Self {
        use image::DynamicImage;
        match img {
            DynamicImage::ImageLuma8(g) => {
                let data = g.as_raw().iter().map(|&v| v as f64).collect();
                Self {
                    width: g.width() as usize,
                    height: g.height() as usize,
                    data,
                }
            }
            other => {
                let rgb = other.to_rgb8();
                let data = rgb
                    .pixels()
                    .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
                    .collect();
                Self {
                    width: rgb.width() as usize,
                    height: rgb.height() as usize,
                    data,
                }
            }
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::from_dynamic(&img))
    }

    /// Quantize to 8 bits (round, clamp) and write as PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf: Vec<u8> = self.data.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect();
        image::save_buffer(
            path,
            &buf,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::L8,
        )
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.width, self.height, |x, y| self.get(self.width - 1 - x, y))
    }

    /// Resize the whole image to `out_w x out_h`.
    pub fn resize(&self, out_w: usize, out_h: usize) -> Self {
        self.resample_region(0.0, 0.0, self.width as f64, self.height as f64, out_w, out_h)
    }

    /// Resample the continuous region `[x0, x1) x [y0, y1)` onto an
    /// `out_w x out_h` grid with a separable triangle filter whose support
    /// widens when downsampling. Samples outside the image repeat the border.
    pub fn resample_region(
        &self,
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
        out_w: usize,
        out_h: usize,
    ) -> Self {
        let wx = axis_weights(self.width, x0, x1, out_w);
        let wy = axis_weights(self.height, y0, y1, out_h);

        // horizontal pass: height x out_w
        let mut tmp = vec![0.0; self.height * out_w];
        for y in 0..self.height {
            let row = &self.data[y * self.width..(y + 1) * self.width];
            for (ox, taps) in wx.iter().enumerate() {
                tmp[y * out_w + ox] = taps.iter().map(|&(i, w)| w * row[i]).sum();
            }
        }
        let mut data = vec![0.0; out_h * out_w];
        for (oy, taps) in wy.iter().enumerate() {
            let out_row = &mut data[oy * out_w..(oy + 1) * out_w];
            for &(i, w) in taps {
                let src = &tmp[i * out_w..(i + 1) * out_w];
                for (o, s) in out_row.iter_mut().zip(src) {
                    *o += w * s;
                }
            }
        }
        Self {
            width: out_w,
            height: out_h,
            data,
        }
    }

    /// Separable Gaussian blur with border replication. `sigma <= 0` is a no-op.
    pub fn gaussian_blur(&self, sigma: f64) -> Self {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as i64;
        let kernel: Vec<f64> = (-radius..=radius)
            .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let norm: f64 = kernel.iter().sum();
        let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
        let (w, h) = (self.width as i64, self.height as i64);
        let mut tmp = vec![0.0; self.data.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let sx = (x + k as i64 - radius).clamp(0, w - 1);
                    acc += kv * self.data[(y * w + sx) as usize];
                }
                tmp[(y * w + x) as usize] = acc;
            }
        }
        let mut data = vec![0.0; self.data.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let sy = (y + k as i64 - radius).clamp(0, h - 1);
                    acc += kv * tmp[(sy * w + x) as usize];
                }
                data[(y * w + x) as usize] = acc;
            }
        }
        Self {
            width: self.width,
            height: self.height,
            data,
        }
    }
}

/// Filter taps (source index, weight) for every output sample along one axis.
fn axis_weights(len: usize, start: f64, end: f64, out: usize) -> Vec<Vec<(usize, f64)>> {
    let step = (end - start) / out as f64;
    let support = step.max(1.0);
    let last = len as i64 - 1;
    (0..out)
        .map(|o| {
            let center = start + (o as f64 + 0.5) * step - 0.5;
            let lo = (center - support).ceil() as i64;
            let hi = (center + support).floor() as i64;
            let mut taps: Vec<(usize, f64)> = Vec::with_capacity((hi - lo + 1).max(1) as usize);
            let mut total = 0.0;
            for s in lo..=hi {
                let w = 1.0 - ((s as f64 - center).abs() / support);
                if w <= 0.0 {
                    continue;
                }
                let idx = s.clamp(0, last) as usize;
                total += w;
                match taps.iter_mut().find(|t| t.0 == idx) {
                    Some(t) => t.1 += w,
                    None => taps.push((idx, w)),
                }
            }
            if taps.is_empty() {
                let idx = (center.round() as i64).clamp(0, last) as usize;
                return vec![(idx, 1.0)];
            }
            for t in &mut taps {
                t.1 /= total;
            }
            taps
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_preserves_constant() {
        let img = LumaImage::filled(37, 21, 100.0);
        for (w, h) in [(74, 42), (10, 7), (37, 21)] {
            let r = img.resize(w, h);
            assert!(r.data().iter().all(|v| (v - 100.0).abs() < 1e-9));
        }
    }

    #[test]
    fn identity_resize_is_exact() {
        let img = LumaImage::from_fn(9, 5, |x, y| (x * 7 + y * 3) as f64);
        let r = img.resize(9, 5);
        for (a, b) in img.data().iter().zip(r.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn resize_commutes_with_flip() {
        let img = LumaImage::from_fn(40, 24, |x, y| ((x * 31 + y * 17) % 23) as f64);
        let a = img.resize(17, 11).flip_horizontal();
        let b = img.flip_horizontal().resize(17, 11);
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn rgb_to_luma_weights() {
        let rgb = image::RgbImage::from_pixel(2, 1, image::Rgb([100, 50, 200]));
        let l = LumaImage::from_dynamic(&image::DynamicImage::ImageRgb8(rgb));
        assert!((l.get(0, 0) - (29.9 + 29.35 + 22.8)).abs() < 1e-9);
    }

    #[test]
    fn blur_keeps_mean_of_constant() {
        let img = LumaImage::filled(12, 12, 40.0).gaussian_blur(1.2);
        assert!(img.data().iter().all(|v| (v - 40.0).abs() < 1e-9));
    }
}
