//! DPM parameters: components, root and part filters, deformations and biases.
//!
//! A model maps one-to-one onto a flat parameter vector. Per component the
//! layout is: root filter weights, bias, then for every part its filter
//! weights followed by the four deformation weights `(dx, dy, dx2, dy2)`.
//! The [`StructurePartition`] groups that vector into the blocks adapted
//! independently: one block per root (with the bias) and one per part.

use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hog::{HogConfig, FEATURE_DIM};

/// Side of a part filter in part-level cells.
pub const PART_SIZE: usize = 6;
/// Lower bound enforced on the quadratic deformation weights while learning.
pub const MIN_QUADRATIC_DEFORMATION: f64 = 0.01;

/// Dense `rows x cols x FEATURE_DIM` weights, row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Filter {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
}

impl Filter {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            weights: vec![0.0; rows * cols * FEATURE_DIM],
        }
    }

    pub fn from_weights(rows: usize, cols: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != rows * cols * FEATURE_DIM {
            return Err(Error::Layout {
                expected: rows * cols * FEATURE_DIM,
                actual: weights.len(),
            });
        }
        Ok(Self { rows, cols, weights })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    #[inline]
    pub fn cell(&self, y: usize, x: usize) -> &[f64] {
        let o = (y * self.cols + x) * FEATURE_DIM;
        &self.weights[o..o + FEATURE_DIM]
    }

    /// Weights of filter row `y` (all columns, contiguous).
    #[inline]
    pub fn row(&self, y: usize) -> &[f64] {
        let n = self.cols * FEATURE_DIM;
        &self.weights[y * n..(y + 1) * n]
    }

    pub fn flipped(&self) -> Filter {
        let perm = crate::hog::flip_permutation();
        let mut weights = vec![0.0; self.weights.len()];
        for y in 0..self.rows {
            for x in 0..self.cols {
                let src = self.cell(y, self.cols - 1 - x);
                let o = (y * self.cols + x) * FEATURE_DIM;
                for (k, &p) in perm.iter().enumerate() {
                    weights[o + k] = src[p];
                }
            }
        }
        Filter {
            rows: self.rows,
            cols: self.cols,
            weights,
        }
    }
}

/// Quadratic deformation cost `dx*Δx + dy*Δy + dx2*Δx² + dy2*Δy²`, where
/// `(Δx, Δy)` is the part displacement from its anchor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Deformation {
    pub dx: f64,
    pub dy: f64,
    pub dx2: f64,
    pub dy2: f64,
}

impl Deformation {
    pub fn new(dx: f64, dy: f64, dx2: f64, dy2: f64) -> Self {
        Self { dx, dy, dx2, dy2 }
    }

    pub fn cost(&self, ddx: f64, ddy: f64) -> f64 {
        self.dx * ddx + self.dy * ddy + self.dx2 * ddx * ddx + self.dy2 * ddy * ddy
    }

    pub fn is_convex(&self) -> bool {
        self.dx2 > 0.0 && self.dy2 > 0.0
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.dx, self.dy, self.dx2, self.dy2]
    }
}

impl Default for Deformation {
    fn default() -> Self {
        Self::new(0.0, 0.0, 0.1, 0.1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartSpec {
    pub filter: Filter,
    /// Anchor in part-level cells, relative to twice the root position.
    pub anchor_x: i64,
    pub anchor_y: i64,
    pub deformation: Deformation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub root: Filter,
    pub parts: Vec<PartSpec>,
    pub bias: f64,
}

impl Component {
    pub fn param_len(&self) -> usize {
        self.root.len() + 1 + self.parts.iter().map(|p| p.filter.len() + 4).sum::<usize>()
    }

    /// Mirror image of this component: flipped filters, mirrored anchors and
    /// negated horizontal linear deformation.
    pub fn flipped(&self) -> Component {
        let doubled_cols = 2 * self.root.cols() as i64;
        Component {
            root: self.root.flipped(),
            parts: self
                .parts
                .iter()
                .map(|p| PartSpec {
                    filter: p.filter.flipped(),
                    anchor_x: doubled_cols - p.filter.cols() as i64 - p.anchor_x,
                    anchor_y: p.anchor_y,
                    deformation: Deformation {
                        dx: -p.deformation.dx,
                        ..p.deformation
                    },
                })
                .collect(),
            bias: self.bias,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpmModel {
    pub components: Vec<Component>,
    pub hog: HogConfig,
    /// Score at the chosen operating point.
    pub threshold: f64,
}

impl DpmModel {
    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::Shape("model has no components".into()));
        }
        for (ci, c) in self.components.iter().enumerate() {
            let finite = c.root.weights().iter().all(|v| v.is_finite())
                && c.bias.is_finite()
                && c.parts.iter().all(|p| {
                    p.filter.weights().iter().all(|v| v.is_finite())
                        && p.deformation.as_array().iter().all(|v| v.is_finite())
                });
            if !finite {
                return Err(Error::Shape(format!("component {ci} has non-finite weights")));
            }
        }
        Ok(())
    }

    pub fn param_len(&self) -> usize {
        self.components.iter().map(Component::param_len).sum()
    }

    /// Smallest root height and width over components, in cells.
    pub fn min_root_size(&self) -> (usize, usize) {
        let rows = self.components.iter().map(|c| c.root.rows()).min().unwrap_or(1);
        let cols = self.components.iter().map(|c| c.root.cols()).min().unwrap_or(1);
        (rows, cols)
    }

    pub fn flipped(&self) -> DpmModel {
        DpmModel {
            components: self.components.iter().map(Component::flipped).collect(),
            ..self.clone()
        }
    }

    /// Offset of each component's parameters in the flat vector.
    pub fn component_offsets(&self) -> Vec<usize> {
        let mut off = 0;
        self.components
            .iter()
            .map(|c| {
                let o = off;
                off += c.param_len();
                o
            })
            .collect()
    }
}

/// What a structure block holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    /// Root appearance, plus the bias unless it has its own block.
    Root { component: usize },
    /// Part appearance plus its deformation weights.
    Part { component: usize, part: usize },
    Bias { component: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructureBlock {
    pub kind: BlockKind,
    pub range: Range<usize>,
}

/// Where the bias is grouped for adaptation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum BiasGrouping {
    #[default]
    WithRoot,
    OwnBlock,
}

/// Ordered, disjoint blocks covering the whole parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructurePartition {
    pub blocks: Vec<StructureBlock>,
    pub len: usize,
}

impl StructurePartition {
    pub fn for_model(model: &DpmModel, grouping: BiasGrouping) -> Self {
        let mut blocks = Vec::new();
        let mut off = 0;
        for (ci, c) in model.components.iter().enumerate() {
            let root_len = c.root.len();
            match grouping {
                BiasGrouping::WithRoot => blocks.push(StructureBlock {
                    kind: BlockKind::Root { component: ci },
                    range: off..off + root_len + 1,
                }),
                BiasGrouping::OwnBlock => {
                    blocks.push(StructureBlock {
                        kind: BlockKind::Root { component: ci },
                        range: off..off + root_len,
                    });
                    blocks.push(StructureBlock {
                        kind: BlockKind::Bias { component: ci },
                        range: off + root_len..off + root_len + 1,
                    });
                }
            }
            off += root_len + 1;
            for (pi, p) in c.parts.iter().enumerate() {
                let n = p.filter.len() + 4;
                blocks.push(StructureBlock {
                    kind: BlockKind::Part {
                        component: ci,
                        part: pi,
                    },
                    range: off..off + n,
                });
                off += n;
            }
        }
        Self { blocks, len: off }
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }
}

/// Flatten a model, using the default bias grouping for the partition.
pub fn vectorize(model: &DpmModel) -> (Vec<f64>, StructurePartition) {
    let mut w = Vec::with_capacity(model.param_len());
    for c in &model.components {
        w.extend_from_slice(c.root.weights());
        w.push(c.bias);
        for p in &c.parts {
            w.extend_from_slice(p.filter.weights());
            w.extend_from_slice(&p.deformation.as_array());
        }
    }
    let part = StructurePartition::for_model(model, BiasGrouping::WithRoot);
    debug_assert_eq!(w.len(), part.len);
    (w, part)
}

/// Inverse of [`vectorize`]: copy `w` into the shape of `template`.
pub fn devectorize(w: &[f64], partition: &StructurePartition, template: &DpmModel) -> Result<DpmModel> {
    let expected = template.param_len();
    if w.len() != expected || partition.len != expected {
        return Err(Error::Layout {
            expected,
            actual: w.len(),
        });
    }
    let mut model = template.clone();
    let mut off = 0;
    for c in &mut model.components {
        let n = c.root.len();
        c.root.weights_mut().copy_from_slice(&w[off..off + n]);
        off += n;
        c.bias = w[off];
        off += 1;
        for p in &mut c.parts {
            let n = p.filter.len();
            p.filter.weights_mut().copy_from_slice(&w[off..off + n]);
            off += n;
            p.deformation = Deformation::new(w[off], w[off + 1], w[off + 2], w[off + 3]);
            off += 4;
        }
    }
    Ok(model)
}

// ---------------------------------------------------------------------------
// Model file
//
//   magic "DPMM" | version u32 | section count u32 | sections...
//   section: name length u8 | name utf-8 | payload length u64 | payload
//
// Integers are little-endian; weights are f64 little-endian. See
// docs/model-format.md for the section payloads.
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"DPMM";
pub const FORMAT_VERSION: u32 = 1;

struct ByteWriter(Vec<u8>);

impl ByteWriter {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn i32(&mut self, v: i32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn section(out: &mut Vec<u8>, name: &str, payload: &[u8]) {
    out.push(name.len() as u8);
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

/// Serialize to the model file format.
pub fn to_bytes(model: &DpmModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(2 + model.components.len() as u32).to_le_bytes());

    let mut hog = ByteWriter(Vec::new());
    hog.u32(model.hog.cell_size as u32);
    hog.u32(model.hog.interval as u32);
    hog.u32(FEATURE_DIM as u32);
    section(&mut out, "hog", &hog.0);

    let mut thr = ByteWriter(Vec::new());
    thr.f64(model.threshold);
    section(&mut out, "threshold", &thr.0);

    for c in &model.components {
        let mut b = ByteWriter(Vec::new());
        b.u32(c.root.rows() as u32);
        b.u32(c.root.cols() as u32);
        b.f64(c.bias);
        b.u32(c.parts.len() as u32);
        for &v in c.root.weights() {
            b.f64(v);
        }
        for p in &c.parts {
            b.u32(p.filter.rows() as u32);
            b.u32(p.filter.cols() as u32);
            b.i32(p.anchor_x as i32);
            b.i32(p.anchor_y as i32);
            for v in p.deformation.as_array() {
                b.f64(v);
            }
            for &v in p.filter.weights() {
                b.f64(v);
            }
        }
        section(&mut out, "component", &b.0);
    }
    out
}

fn read_filter(r: &mut ByteReader<'_>, rows: usize, cols: usize) -> Result<Filter> {
    let n = rows
        .checked_mul(cols)
        .and_then(|v| v.checked_mul(FEATURE_DIM))
        .ok_or_else(|| Error::Format("filter dimensions overflow".into()))?;
    if n * 8 > r.buf.len() - r.pos {
        return Err(Error::Format("truncated file".into()));
    }
    let weights = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    Filter::from_weights(rows, cols, weights)
}

/// Parse the model file format.
pub fn from_bytes(bytes: &[u8]) -> Result<DpmModel> {
    let mut r = ByteReader { buf: bytes, pos: 0 };
    if r.take(4).map_err(|_| Error::Format("missing magic".into()))? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let n_sections = r.u32()?;
    let mut hog = None;
    let mut threshold = 0.0;
    let mut components = Vec::new();
    for _ in 0..n_sections {
        let name_len = r.u8()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("section name is not utf-8".into()))?
            .to_string();
        let len = r.u64()? as usize;
        let mut s = ByteReader { buf: r.take(len)?, pos: 0 };
        match name.as_str() {
            "hog" => {
                let cell_size = s.u32()? as usize;
                let interval = s.u32()? as usize;
                let dim = s.u32()? as usize;
                if dim != FEATURE_DIM {
                    return Err(Error::Format(format!("feature dimension {dim}")));
                }
                hog = Some(HogConfig { cell_size, interval });
            }
            "threshold" => threshold = s.f64()?,
            "component" => {
                let rows = s.u32()? as usize;
                let cols = s.u32()? as usize;
                let bias = s.f64()?;
                let n_parts = s.u32()? as usize;
                let root = read_filter(&mut s, rows, cols)?;
                let mut parts = Vec::with_capacity(n_parts.min(64));
                for _ in 0..n_parts {
                    let prow = s.u32()? as usize;
                    let pcol = s.u32()? as usize;
                    let anchor_x = s.i32()? as i64;
                    let anchor_y = s.i32()? as i64;
                    let d = Deformation::new(s.f64()?, s.f64()?, s.f64()?, s.f64()?);
                    let filter = read_filter(&mut s, prow, pcol)?;
                    parts.push(PartSpec {
                        filter,
                        anchor_x,
                        anchor_y,
                        deformation: d,
                    });
                }
                components.push(Component { root, parts, bias });
            }
            // unknown sections are skipped
            _ => continue,
        }
        if !s.done() {
            return Err(Error::Format(format!("trailing bytes in section {name}")));
        }
    }
    if !r.done() {
        return Err(Error::Format("trailing bytes after last section".into()));
    }
    let hog = hog.ok_or_else(|| Error::Format("missing hog section".into()))?;
    let model = DpmModel {
        components,
        hog,
        threshold,
    };
    model.validate().map_err(|e| Error::Format(e.to_string()))?;
    Ok(model)
}

pub fn save(model: &DpmModel, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&to_bytes(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<DpmModel> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use crate::rng;

    #[test]
    fn round_trip_vector() {
        let m = random_model(&mut rng::stream(1, 0), 3, 8);
        let (w, p) = vectorize(&m);
        assert_eq!(devectorize(&w, &p, &m).unwrap(), m);
    }

    #[test]
    fn partition_counts_and_coverage() {
        let m = random_model(&mut rng::stream(2, 0), 3, 8);
        let (w, p) = vectorize(&m);
        assert_eq!(p.num_blocks(), 27);
        let mut next = 0;
        for b in &p.blocks {
            assert_eq!(b.range.start, next);
            next = b.range.end;
        }
        assert_eq!(next, w.len());

        let own = StructurePartition::for_model(&m, BiasGrouping::OwnBlock);
        assert_eq!(own.num_blocks(), 30);
        assert_eq!(own.len, w.len());
    }

    #[test]
    fn zero_model_gives_zero_vector() {
        let mut m = random_model(&mut rng::stream(3, 0), 2, 2);
        let (w0, p) = vectorize(&m);
        let zeros = vec![0.0; w0.len()];
        m = devectorize(&zeros, &p, &m).unwrap();
        let (w, _) = vectorize(&m);
        assert_eq!(w, zeros);
    }

    #[test]
    fn wrong_length_is_layout_error() {
        let m = random_model(&mut rng::stream(4, 0), 1, 1);
        let (w, p) = vectorize(&m);
        assert!(matches!(devectorize(&w[1..], &p, &m), Err(Error::Layout { .. })));
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let m = random_model(&mut rng::stream(5, 0), 3, 8);
        let bytes = to_bytes(&m);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn corrupt_and_truncated_files_fail() {
        let m = random_model(&mut rng::stream(6, 0), 1, 2);
        let mut bytes = to_bytes(&m);
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        let mut wrong_version = bytes.clone();
        wrong_version[4] = 9;
        assert!(matches!(from_bytes(&wrong_version), Err(Error::Format(_))));
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn fixed_byte_layout() {
        // one component, 1x1 root, no parts: every byte is pinned
        let m = DpmModel {
            components: vec![Component {
                root: Filter::from_weights(1, 1, (0..FEATURE_DIM).map(|i| i as f64 * 0.5).collect()).unwrap(),
                parts: vec![],
                bias: -1.5,
            }],
            hog: HogConfig::default(),
            threshold: 0.75,
        };
        let b = to_bytes(&m);
        assert_eq!(&b[0..12], b"DPMM\x01\x00\x00\x00\x03\x00\x00\x00");
        assert_eq!(&b[12..16], b"\x03hog");
        assert_eq!(&b[16..24], &12u64.to_le_bytes());
        assert_eq!(&b[24..36], &[8, 0, 0, 0, 10, 0, 0, 0, 31, 0, 0, 0]);
        let comp_payload = 4 + 4 + 8 + 4 + FEATURE_DIM * 8;
        assert_eq!(b.len(), 36 + 1 + 9 + 8 + 8 + 1 + 9 + 8 + comp_payload);
        let tail = &b[b.len() - 8..];
        assert_eq!(tail, &15.0f64.to_le_bytes());
        assert_eq!(from_bytes(&b).unwrap(), m);
    }

    #[test]
    fn flip_twice_is_identity() {
        let m = random_model(&mut rng::stream(7, 0), 2, 3);
        assert_eq!(m.flipped().flipped(), m);
    }
}
