//! Boxes, overlap, ground-truth annotations and the "moderate" difficulty filter.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in continuous pixel coordinates.
///
/// Construction through [`BBox::new`] guarantees a positive width and height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    left: f64,
    top: f64,
    right: f64,
    bottom: f64,
}

impl BBox {
    pub fn new(left: f64, top: f64, right: f64, bottom: f64) -> Result<Self> {
        let finite = left.is_finite() && top.is_finite() && right.is_finite() && bottom.is_finite();
        if !finite || right <= left || bottom <= top {
            return Err(Error::InvalidBox {
                left,
                top,
                right,
                bottom,
            });
        }
        Ok(Self {
            left,
            top,
            right,
            bottom,
        })
    }

    pub fn left(&self) -> f64 {
        self.left
    }

    pub fn top(&self) -> f64 {
        self.top
    }

    pub fn right(&self) -> f64 {
        self.right
    }

    pub fn bottom(&self) -> f64 {
        self.bottom
    }

    pub fn width(&self) -> f64 {
        self.right - self.left
    }

    pub fn height(&self) -> f64 {
        self.bottom - self.top
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Width over height.
    pub fn aspect_ratio(&self) -> f64 {
        self.width() / self.height()
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.right.min(other.right) - self.left.max(other.left);
        let h = self.bottom.min(other.bottom) - self.top.max(other.top);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Mirror about the vertical axis of an image of the given width.
    pub fn flip_horizontal(&self, image_width: f64) -> BBox {
        BBox {
            left: image_width - self.right,
            top: self.top,
            right: image_width - self.left,
            bottom: self.bottom,
        }
    }
}

/// Intersection over union. Symmetric and in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Clamp a box to `[0, width] x [0, height]`.
pub fn clip_to_image(b: &BBox, width: f64, height: f64) -> Result<BBox> {
    if !(width > 0.0 && height > 0.0) {
        return Err(Error::Shape(format!("image dimensions {width}x{height}")));
    }
    let left = b.left.clamp(0.0, width);
    let top = b.top.clamp(0.0, height);
    let right = b.right.clamp(0.0, width);
    let bottom = b.bottom.clamp(0.0, height);
    BBox::new(left, top, right, bottom).map_err(|_| Error::EmptyAfterClip)
}

/// KITTI occlusion level (label field 3: 0, 1, 2).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Occlusion {
    None,
    Partial,
    Heavy,
}

impl Occlusion {
    pub fn from_kitti(code: i64) -> Option<Self> {
        match code {
            0 => Some(Occlusion::None),
            1 => Some(Occlusion::Partial),
            2 => Some(Occlusion::Heavy),
            _ => None,
        }
    }

    pub fn kitti_code(self) -> i64 {
        match self {
            Occlusion::None => 0,
            Occlusion::Partial => 1,
            Occlusion::Heavy => 2,
        }
    }
}

/// A ground-truth object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub class_label: String,
    pub bbox: BBox,
    /// Fraction of the object outside the image, in `[0, 1]`.
    pub truncation: f64,
    pub occlusion: Occlusion,
    pub source_image: String,
}

impl Annotation {
    pub fn height(&self) -> f64 {
        self.bbox.height()
    }
}

/// Thresholds of the moderate difficulty setting. Both limits are inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModerateFilter {
    pub max_truncation: f64,
    pub min_height: f64,
    pub allow_partial_occlusion: bool,
}

impl Default for ModerateFilter {
    fn default() -> Self {
        Self {
            max_truncation: 0.30,
            min_height: 25.0,
            allow_partial_occlusion: true,
        }
    }
}

impl ModerateFilter {
    pub fn accepts(&self, ann: &Annotation) -> bool {
        let occlusion_ok = match ann.occlusion {
            Occlusion::None => true,
            Occlusion::Partial => self.allow_partial_occlusion,
            Occlusion::Heavy => false,
        };
        occlusion_ok && ann.truncation <= self.max_truncation && ann.height() >= self.min_height
    }
}

/// Moderate setting with the default thresholds: at most partial occlusion,
/// truncation at most 30% and height at least 25 px.
pub fn is_moderate(ann: &Annotation) -> bool {
    ModerateFilter::default().accepts(ann)
}

/// Where a part ended up for a particular detection, in part-level cell coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartPlacement {
    pub part: usize,
    pub x: i64,
    pub y: i64,
}

/// A scored detection window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub component_id: usize,
    pub part_placements: Vec<PartPlacement>,
    /// Pyramid level of the root, and its position in root-level cells.
    pub level: usize,
    pub root_x: usize,
    pub root_y: usize,
}
