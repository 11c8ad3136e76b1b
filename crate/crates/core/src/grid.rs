//! Uniform tensor-product grids on boxes in R^d.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A uniform tensor grid. Points are enumerated in row-major order (last axis fastest).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    lower: Vec<f64>,
    upper: Vec<f64>,
    counts: Vec<usize>,
}

impl Grid {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, counts: Vec<usize>) -> Result<Self> {
        let d = lower.len();
        if d == 0 || upper.len() != d || counts.len() != d {
            return Err(Error::invalid("grid bounds and counts must share a positive dimension"));
        }
        for k in 0..d {
            if counts[k] == 0 {
                return Err(Error::invalid(format!("grid axis {k} has no points")));
            }
            if !(lower[k].is_finite() && upper[k].is_finite()) || upper[k] < lower[k] {
                return Err(Error::invalid(format!("grid axis {k} has invalid bounds")));
            }
            if counts[k] > 1 && upper[k] == lower[k] {
                return Err(Error::invalid(format!("grid axis {k} is degenerate")));
            }
        }
        Ok(Self { lower, upper, counts })
    }

    pub fn uniform_1d(lower: f64, upper: f64, n: usize) -> Result<Self> {
        Self::new(vec![lower], vec![upper], vec![n])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Spacing along `axis`; a single-point axis reports its box width, or 1 if the box is flat.
    pub fn spacing(&self, axis: usize) -> f64 {
        let n = self.counts[axis];
        let w = self.upper[axis] - self.lower[axis];
        if n > 1 {
            w / (n - 1) as f64
        } else if w > 0.0 {
            w
        } else {
            1.0
        }
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim()).map(|k| self.spacing(k)).product()
    }

    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        let n = self.counts[axis];
        if n == 1 {
            return self.lower[axis];
        }
        if i + 1 == n {
            return self.upper[axis];
        }
        self.lower[axis] + i as f64 * (self.upper[axis] - self.lower[axis]) / (n - 1) as f64
    }

    pub fn axis_coords(&self, axis: usize) -> Vec<f64> {
        (0..self.counts[axis]).map(|i| self.coord(axis, i)).collect()
    }

    pub fn unravel(&self, mut flat: usize) -> Vec<usize> {
        let d = self.dim();
        let mut idx = vec![0; d];
        for k in (0..d).rev() {
            idx[k] = flat % self.counts[k];
            flat /= self.counts[k];
        }
        idx
    }

    pub fn ravel(&self, idx: &[usize]) -> usize {
        let mut flat = 0;
        for k in 0..self.dim() {
            flat = flat * self.counts[k] + idx[k];
        }
        flat
    }

    pub fn point(&self, flat: usize) -> Vec<f64> {
        self.unravel(flat)
            .iter()
            .enumerate()
            .map(|(k, &i)| self.coord(k, i))
            .collect()
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.point(i)).collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .enumerate()
            .all(|(k, &v)| v >= self.lower[k] && v <= self.upper[k])
    }

    /// Clamp `x` into the grid hull; returns true if it was outside.
    pub fn clamp(&self, x: &mut [f64]) -> bool {
        let mut outside = false;
        for (k, v) in x.iter_mut().enumerate() {
            if *v < self.lower[k] {
                *v = self.lower[k];
                outside = true;
            } else if *v > self.upper[k] {
                *v = self.upper[k];
                outside = true;
            } else if v.is_nan() {
                *v = self.lower[k];
                outside = true;
            }
        }
        outside
    }

    /// Flat index of the grid point nearest to `x` (clamped to the hull).
    pub fn nearest(&self, x: &[f64]) -> usize {
        let mut flat = 0;
        for k in 0..self.dim() {
            let n = self.counts[k];
            let i = if n == 1 {
                0
            } else {
                let s = ((x[k] - self.lower[k]) / self.spacing(k)).round();
                s.clamp(0.0, (n - 1) as f64) as usize
            };
            flat = flat * n + i;
        }
        flat
    }

    /// Multilinear interpolation of `values` (one per grid point, `stride` interleaved
    /// components, component `comp`) at `x`, clamped to the hull.
    pub fn interpolate(&self, values: &[f64], stride: usize, comp: usize, x: &[f64]) -> f64 {
        let d = self.dim();
        let mut base = [0usize; 8];
        let mut frac = [0f64; 8];
        let mut base_v;
        let mut frac_v;
        let (base, frac): (&mut [usize], &mut [f64]) = if d <= 8 {
            (&mut base[..d], &mut frac[..d])
        } else {
            base_v = vec![0; d];
            frac_v = vec![0.0; d];
            (&mut base_v[..], &mut frac_v[..])
        };
        for k in 0..d {
            let n = self.counts[k];
            if n == 1 {
                base[k] = 0;
                frac[k] = 0.0;
                continue;
            }
            let s = ((x[k] - self.lower[k]) / self.spacing(k)).clamp(0.0, (n - 1) as f64);
            let i = (s.floor() as usize).min(n - 2);
            base[k] = i;
            frac[k] = s - i as f64;
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut flat = 0;
            for k in 0..d {
                let up = (corner >> k) & 1 == 1;
                let n = self.counts[k];
                let i = if up && n > 1 { base[k] + 1 } else { base[k] };
                w *= if n == 1 {
                    if up {
                        0.0
                    } else {
                        1.0
                    }
                } else if up {
                    frac[k]
                } else {
                    1.0 - frac[k]
                };
                flat = flat * n + i;
            }
            if w != 0.0 {
                acc += w * values[flat * stride + comp];
            }
        }
        acc
    }

    /// Centred box window `|x_k - centre_k| <= half_width` as flat indices.
    pub fn box_window(&self, centre: &[f64], half_width: f64) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| {
                let p = self.point(i);
                p.iter()
                    .zip(centre)
                    .all(|(a, c)| (a - c).abs() <= half_width * (1.0 + 1e-12) + 1e-12)
            })
            .collect()
    }
}
