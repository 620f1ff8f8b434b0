//! Generalized distance transform with a separable quadratic cost.
//!
//! For every output cell `q` this computes
//! `max_p scores[p] - (dx*Δx + dy*Δy + dx2*Δx² + dy2*Δy²)` with `Δ = p - q`,
//! in linear time per row and column via the lower envelope of parabolas.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::model::Deformation;

use super::ScoreMap;

/// Output of a distance transform over an arbitrary (possibly larger) grid.
///
/// Output cell `(i, j)` corresponds to input coordinates
/// `(row_start + i * row_step, col_start + j * col_step)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Transformed {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    /// Best placement `(y, x)` in input coordinates for every output cell.
    pub arg: Vec<(i64, i64)>,
}

impl Transformed {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    #[inline]
    pub fn arg(&self, i: usize, j: usize) -> (i64, i64) {
        self.arg[i * self.cols + j]
    }
}

/// Strided output positions along one axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Axis {
    pub start: i64,
    pub step: i64,
    pub len: usize,
}

impl Axis {
    pub fn dense(range: Range<i64>) -> Self {
        Self {
            start: range.start,
            step: 1,
            len: (range.end - range.start).max(0) as usize,
        }
    }
}

/// Scratch space for the 1-D envelope so rows and columns reuse allocations.
#[derive(Default)]
struct Envelope {
    v: Vec<usize>,
    z: Vec<f64>,
}

impl Envelope {
    /// `out[i] = max_p f[p] - (quad*(p-q)² + lin*(p-q))` for `q = axis.start + i*axis.step`.
    fn run(&mut self, f: &[f64], quad: f64, lin: f64, axis: Axis, out: &mut [f64], arg: &mut [i64]) {
        let n = f.len();
        debug_assert!(n > 0);
        // minimization form over g = -f; parabola p evaluated at q is
        // g[p] + quad*(p-q)² + lin*(p-q)
        let key = |p: usize| -> f64 {
            let pf = p as f64;
            -f[p] + quad * pf * pf + lin * pf
        };
        self.v.clear();
        self.z.clear();
        self.v.push(0);
        self.z.push(f64::NEG_INFINITY);
        for p in 1..n {
            let kp = key(p);
            loop {
                let r = *self.v.last().unwrap();
                let s = (kp - key(r)) / (2.0 * quad * (p - r) as f64);
                if s <= *self.z.last().unwrap() {
                    self.v.pop();
                    self.z.pop();
                    if self.v.is_empty() {
                        self.v.push(p);
                        self.z.push(f64::NEG_INFINITY);
                        break;
                    }
                } else {
                    self.v.push(p);
                    self.z.push(s);
                    break;
                }
            }
        }
        let mut k = 0;
        for i in 0..axis.len {
            let q = axis.start + axis.step * i as i64;
            let qf = q as f64;
            while k + 1 < self.v.len() && self.z[k + 1] < qf {
                k += 1;
            }
            let p = self.v[k];
            let d = p as f64 - qf;
            out[i] = f[p] - (quad * d * d + lin * d);
            arg[i] = p as i64;
        }
    }
}

/// Distance transform over an arbitrary output lattice.
pub fn gdt_over(scores: &ScoreMap, d: &Deformation, rows: Axis, cols: Axis) -> Result<Transformed> {
    if !d.is_convex() {
        return Err(Error::Deformation { dx2: d.dx2, dy2: d.dy2 });
    }
    let (in_rows, in_cols) = (scores.rows(), scores.cols());
    let n_out = rows.len * cols.len;
    if in_rows == 0 || in_cols == 0 {
        return Ok(Transformed {
            rows: rows.len,
            cols: cols.len,
            values: vec![f64::NEG_INFINITY; n_out],
            arg: vec![(0, 0); n_out],
        });
    }
    let mut env = Envelope::default();

    // pass 1: along x for every input row -> in_rows x cols.len
    let mut horiz = vec![0.0; in_rows * cols.len];
    let mut harg = vec![0i64; in_rows * cols.len];
    for y in 0..in_rows {
        let o = y * cols.len;
        env.run(
            scores.row(y),
            d.dx2,
            d.dx,
            cols,
            &mut horiz[o..o + cols.len],
            &mut harg[o..o + cols.len],
        );
    }

    // pass 2: along y for every output column
    let mut values = vec![0.0; n_out];
    let mut arg = vec![(0i64, 0i64); n_out];
    let mut column = vec![0.0; in_rows];
    let mut out_col = vec![0.0; rows.len];
    let mut out_arg = vec![0i64; rows.len];
    for j in 0..cols.len {
        for (y, c) in column.iter_mut().enumerate() {
            *c = horiz[y * cols.len + j];
        }
        env.run(&column, d.dy2, d.dy, rows, &mut out_col, &mut out_arg);
        for i in 0..rows.len {
            let py = out_arg[i];
            values[i * cols.len + j] = out_col[i];
            arg[i * cols.len + j] = (py, harg[py as usize * cols.len + j]);
        }
    }
    Ok(Transformed {
        rows: rows.len,
        cols: cols.len,
        values,
        arg,
    })
}

/// Distance transform on the input grid itself.
pub fn gdt(scores: &ScoreMap, d: &Deformation) -> Result<Transformed> {
    gdt_over(
        scores,
        d,
        Axis::dense(0..scores.rows() as i64),
        Axis::dense(0..scores.cols() as i64),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    /// O(n^4) reference.
    fn brute(scores: &ScoreMap, d: &Deformation, rows: Axis, cols: Axis) -> Vec<f64> {
        let mut out = Vec::new();
        for i in 0..rows.len {
            let qy = rows.start + rows.step * i as i64;
            for j in 0..cols.len {
                let qx = cols.start + cols.step * j as i64;
                let mut best = f64::NEG_INFINITY;
                for py in 0..scores.rows() {
                    for px in 0..scores.cols() {
                        let (ddx, ddy) = ((px as i64 - qx) as f64, (py as i64 - qy) as f64);
                        best = best.max(scores.get(py, px) - d.cost(ddx, ddy));
                    }
                }
                out.push(best);
            }
        }
        out
    }

    fn random_map(rng: &mut impl Rng, rows: usize, cols: usize) -> ScoreMap {
        ScoreMap::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-5.0..5.0)).collect())
    }

    #[test]
    fn matches_brute_force_on_random_instances() {
        let mut rng = rng::stream(11, 0);
        for _ in 0..200 {
            let (r, c) = (rng.gen_range(1..12), rng.gen_range(1..10));
            let m = random_map(&mut rng, r, c);
            let d = Deformation::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(0.01..2.0),
                rng.gen_range(0.01..2.0),
            );
            let t = gdt(&m, &d).unwrap();
            let b = brute(&m, &d, Axis::dense(0..r as i64), Axis::dense(0..c as i64));
            for (k, (x, y)) in t.values.iter().zip(&b).enumerate() {
                assert!((x - y).abs() <= 1e-9, "cell {k}: {x} vs {y}");
                let (ay, ax) = t.arg[k];
                let (qy, qx) = ((k / c) as i64, (k % c) as i64);
                let rec = m.get(ay as usize, ax as usize) - d.cost((ax - qx) as f64, (ay - qy) as f64);
                assert!((rec - x).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn extended_strided_lattice_matches_brute_force() {
        let mut rng = rng::stream(12, 0);
        for _ in 0..50 {
            let m = random_map(&mut rng, 7, 9);
            let d = Deformation::new(0.2, -0.1, 0.3, 0.05);
            let rows = Axis { start: -3, step: 2, len: 7 };
            let cols = Axis { start: 1, step: 2, len: 6 };
            let t = gdt_over(&m, &d, rows, cols).unwrap();
            let b = brute(&m, &d, rows, cols);
            for (x, y) in t.values.iter().zip(&b) {
                assert!((x - y).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn single_peak_decays_quadratically() {
        let mut v = vec![-100.0; 20 * 15];
        v[7 * 15 + 5] = 10.0;
        let m = ScoreMap::new(20, 15, v);
        let d = Deformation::new(0.0, 0.0, 0.01, 0.01);
        let t = gdt(&m, &d).unwrap();
        assert_eq!(t.get(7, 5), 10.0);
        assert!((t.get(7, 8) - (10.0 - 0.09)).abs() < 1e-12);
        assert!((t.get(10, 5) - (10.0 - 0.09)).abs() < 1e-12);
        assert_eq!(t.arg(12, 2), (7, 5));
    }

    #[test]
    fn stiff_deformation_pins_placement() {
        let mut rng = rng::stream(13, 0);
        let m = random_map(&mut rng, 6, 8);
        let d = Deformation::new(0.0, 0.0, 1e6, 1e6);
        let t = gdt(&m, &d).unwrap();
        for y in 0..6 {
            for x in 0..8 {
                assert_eq!(t.get(y, x), m.get(y, x));
                assert_eq!(t.arg(y, x), (y as i64, x as i64));
            }
        }
    }

    #[test]
    fn non_convex_is_rejected() {
        let m = ScoreMap::new(2, 2, vec![0.0; 4]);
        let r = gdt(&m, &Deformation::new(0.0, 0.0, 0.0, 0.1));
        assert!(matches!(r, Err(Error::Deformation { .. })));
    }
}
