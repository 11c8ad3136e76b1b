//! Nonnegative discrete measures on point sets in R^d and the distances used to compare them.
//!
//! Each point carries its own mass: for a measure with a density ρ on a uniform grid the
//! weight at `x` is `ρ(x) * cell_volume`. Purely atomic measures use `cell_volume = 1`.
//! The cell volume is quadrature metadata: it converts weights back into densities and
//! guards against comparing measures discretised at different resolutions.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::MinCostFlow;
use crate::grid::Grid;
use crate::numerics::pairwise_sum;

/// Tolerance on total mass for a measure to count as a probability measure.
pub const PROBABILITY_TOL: f64 = 1e-12;

const VOLUME_RTOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MeasureRepr", into = "MeasureRepr")]
pub struct DiscreteMeasure {
    dim: usize,
    coords: Vec<f64>,
    weights: Vec<f64>,
    cell_volume: f64,
    atomic: bool,
}

#[derive(Serialize, Deserialize)]
struct MeasureRepr {
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
    cell_volume: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    atomic: bool,
}

impl TryFrom<MeasureRepr> for DiscreteMeasure {
    type Error = Error;
    fn try_from(r: MeasureRepr) -> Result<Self> {
        let mut m = DiscreteMeasure::new(r.points, r.weights, r.cell_volume)?;
        m.atomic = r.atomic;
        Ok(m)
    }
}

impl From<DiscreteMeasure> for MeasureRepr {
    fn from(m: DiscreteMeasure) -> Self {
        MeasureRepr {
            points: m.points(),
            weights: m.weights,
            cell_volume: m.cell_volume,
            atomic: m.atomic,
        }
    }
}

/// Bit-exact key for a point; `-0.0` and `0.0` coincide.
fn point_key(p: &[f64]) -> Vec<u64> {
    p.iter().map(|&v| if v == 0.0 { 0 } else { v.to_bits() }).collect()
}

impl DiscreteMeasure {
    pub fn new(points: Vec<Vec<f64>>, weights: Vec<f64>, cell_volume: f64) -> Result<Self> {
        if points.len() != weights.len() {
            return Err(Error::invalid(format!(
                "{} points but {} weights",
                points.len(),
                weights.len()
            )));
        }
        if points.is_empty() {
            return Err(Error::invalid("measure has no points"));
        }
        let dim = points[0].len();
        if dim == 0 || points.iter().any(|p| p.len() != dim) {
            return Err(Error::invalid("points must share a positive dimension"));
        }
        let coords: Vec<f64> = points.into_iter().flatten().collect();
        Self::from_flat(dim, coords, weights, cell_volume)
    }

    pub(crate) fn from_flat(
        dim: usize,
        coords: Vec<f64>,
        weights: Vec<f64>,
        cell_volume: f64,
    ) -> Result<Self> {
        if !(cell_volume.is_finite() && cell_volume > 0.0) {
            return Err(Error::invalid(format!("cell_volume must be positive, got {cell_volume}")));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(Error::invalid(format!("weights must be finite and nonnegative, got {w}")));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("point coordinates must be finite"));
        }
        let m = Self {
            dim,
            coords,
            weights,
            cell_volume,
            atomic: false,
        };
        let mut seen = HashMap::with_capacity(m.len());
        for i in 0..m.len() {
            if seen.insert(point_key(m.point(i)), i).is_some() {
                return Err(Error::invalid(format!("duplicate point at index {i}")));
            }
        }
        if !m.total_mass().is_finite() {
            return Err(Error::invalid("total mass is not finite"));
        }
        Ok(m)
    }

    /// Purely atomic measure (`cell_volume = 1`).
    pub fn atoms(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        let mut m = Self::new(points, weights, 1.0)?;
        m.atomic = true;
        Ok(m)
    }

    /// Measure with the given point masses on every point of `grid`.
    pub fn on_grid(grid: &Grid, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != grid.len() {
            return Err(Error::invalid(format!(
                "grid has {} points but {} weights were given",
                grid.len(),
                weights.len()
            )));
        }
        let coords = (0..grid.len()).flat_map(|i| grid.point(i)).collect();
        Self::from_flat(grid.dim(), coords, weights, grid.cell_volume())
    }

    /// Probability measure whose weights are `density(x) * cell_volume`, renormalised to unit mass.
    pub fn probability_from_density(grid: &Grid, density: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let vol = grid.cell_volume();
        let w = (0..grid.len()).map(|i| density(&grid.point(i)) * vol).collect();
        Self::on_grid(grid, w)?.normalized()
    }

    pub fn uniform(grid: &Grid) -> Result<Self> {
        Self::on_grid(grid, vec![1.0 / grid.len() as f64; grid.len()])
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.point(i).to_vec()).collect()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn cell_volume(&self) -> f64 {
        self.cell_volume
    }

    pub fn is_atomic(&self) -> bool {
        self.atomic
    }

    /// Density value `weight / cell_volume` at point `i`.
    pub fn density(&self, i: usize) -> f64 {
        self.weights[i] / self.cell_volume
    }

    pub fn total_mass(&self) -> f64 {
        pairwise_sum(&self.weights)
    }

    pub fn is_probability(&self) -> bool {
        (self.total_mass() - 1.0).abs() <= PROBABILITY_TOL
    }

    /// Rescale to unit mass.
    pub fn normalized(&self) -> Result<Self> {
        let m = self.total_mass();
        if !(m > 0.0) {
            return Err(Error::invalid("cannot normalise a measure of zero mass"));
        }
        let mut out = self.clone();
        for w in &mut out.weights {
            *w /= m;
        }
        Ok(out)
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        for w in &mut out.weights {
            *w *= c;
        }
        out
    }

    /// Same support and quadrature, new weights.
    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.len() {
            return Err(Error::invalid("weight vector length differs from support size"));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(Error::invalid(format!("weights must be finite and nonnegative, got {w}")));
        }
        let mut out = self.clone();
        out.weights = weights;
        Ok(out)
    }

    /// True when both measures list exactly the same points in the same order.
    pub fn same_support(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.coords.len() == other.coords.len()
            && self
                .coords
                .iter()
                .zip(&other.coords)
                .all(|(a, b)| a == b)
    }

    pub fn mass_on(&self, window: &[usize]) -> f64 {
        let w: Vec<f64> = window.iter().map(|&i| self.weights[i]).collect();
        pairwise_sum(&w)
    }

    /// Conditional measure on `window`: weights `m_i / m(window)` inside, zero outside.
    /// The point list is kept, so window indices stay valid on the result.
    pub fn restrict(&self, window: &[usize]) -> Result<Self> {
        let inside = self.window_mask(window)?;
        let mass = self.mass_on(window);
        if !(mass > 0.0) {
            return Err(Error::EmptyRestriction);
        }
        let outside_zero = self
            .weights
            .iter()
            .zip(&inside)
            .all(|(w, &keep)| keep || *w == 0.0);
        if outside_zero && (mass - 1.0).abs() <= PROBABILITY_TOL {
            // already a probability measure carried by the window
            return Ok(self.clone());
        }
        let weights = self
            .weights
            .iter()
            .zip(&inside)
            .map(|(w, &keep)| if keep { w / mass } else { 0.0 })
            .collect();
        self.with_weights(weights)
    }

    fn window_mask(&self, window: &[usize]) -> Result<Vec<bool>> {
        let mut mask = vec![false; self.len()];
        for &i in window {
            if i >= self.len() {
                return Err(Error::invalid(format!(
                    "window index {i} out of range for {} points",
                    self.len()
                )));
            }
            mask[i] = true;
        }
        Ok(mask)
    }

    /// Sub-measure on the listed points, in the listed order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        self.window_mask(indices)?;
        let coords = indices
            .iter()
            .flat_map(|&i| self.point(i).iter().copied())
            .collect();
        let weights = indices.iter().map(|&i| self.weights[i]).collect();
        let mut m = Self::from_flat(self.dim, coords, weights, self.cell_volume)?;
        m.atomic = self.atomic;
        Ok(m)
    }

    /// Indices of points with positive weight.
    pub fn support(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.weights[i] > 0.0).collect()
    }

    /// Weighted mean of the coordinates (normalised by total mass).
    pub fn mean(&self) -> Vec<f64> {
        let mass = self.total_mass();
        (0..self.dim)
            .map(|k| {
                let terms: Vec<f64> = (0..self.len())
                    .map(|i| self.weights[i] * self.point(i)[k])
                    .collect();
                pairwise_sum(&terms) / mass
            })
            .collect()
    }

    /// Weighted variance of coordinate `axis`.
    pub fn variance(&self, axis: usize) -> f64 {
        let m = self.mean()[axis];
        let terms: Vec<f64> = (0..self.len())
            .map(|i| self.weights[i] * (self.point(i)[axis] - m).powi(2))
            .collect();
        pairwise_sum(&terms) / self.total_mass()
    }

    /// Integral of a function given by its values on the support.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(values)
            .map(|(w, v)| if *w == 0.0 { 0.0 } else { w * v })
            .collect();
        pairwise_sum(&terms)
    }
}

/// Two measures expressed on a common (union) support.
pub(crate) struct Aligned {
    pub dim: usize,
    pub coords: Vec<f64>,
    pub wa: Vec<f64>,
    pub wb: Vec<f64>,
}

fn check_volumes(a: &DiscreteMeasure, b: &DiscreteMeasure) -> Result<()> {
    let (va, vb) = (a.cell_volume, b.cell_volume);
    if (va - vb).abs() > VOLUME_RTOL * va.max(vb) {
        return Err(Error::IncompatibleQuadrature(va, vb));
    }
    Ok(())
}

pub(crate) fn align(a: &DiscreteMeasure, b: &DiscreteMeasure) -> Result<Aligned> {
    if a.dim != b.dim {
        return Err(Error::invalid(format!(
            "dimension mismatch: {} vs {}",
            a.dim, b.dim
        )));
    }
    check_volumes(a, b)?;
    if a.same_support(b) {
        return Ok(Aligned {
            dim: a.dim,
            coords: a.coords.clone(),
            wa: a.weights.clone(),
            wb: b.weights.clone(),
        });
    }
    let mut index: HashMap<Vec<u64>, usize> = HashMap::with_capacity(a.len() + b.len());
    let mut coords = a.coords.clone();
    let mut wa = a.weights.clone();
    let mut wb = vec![0.0; a.len()];
    for i in 0..a.len() {
        index.insert(point_key(a.point(i)), i);
    }
    for j in 0..b.len() {
        match index.get(&point_key(b.point(j))) {
            Some(&i) => wb[i] = b.weights[j],
            None => {
                index.insert(point_key(b.point(j)), wa.len());
                coords.extend_from_slice(b.point(j));
                wa.push(0.0);
                wb.push(b.weights[j]);
            }
        }
    }
    Ok(Aligned {
        dim: a.dim,
        coords,
        wa,
        wb,
    })
}

/// Total-variation norm `||a - b||` of the signed difference: `Σ |a_i - b_i|` over the
/// union of supports. On a discrete space this attains the supremum over test functions
/// bounded by one.
pub fn tv_norm(a: &DiscreteMeasure, b: &DiscreteMeasure) -> Result<f64> {
    let al = align(a, b)?;
    let diffs: Vec<f64> = al.wa.iter().zip(&al.wb).map(|(x, y)| (x - y).abs()).collect();
    Ok(pairwise_sum(&diffs))
}

/// Total-variation norm of `a1 ⊗ a2 - b1 ⊗ b2`.
pub fn product_tv_norm(
    a1: &DiscreteMeasure,
    a2: &DiscreteMeasure,
    b1: &DiscreteMeasure,
    b2: &DiscreteMeasure,
) -> Result<f64> {
    let x = align(a1, b1)?;
    let y = align(a2, b2)?;
    let all1: Vec<usize> = (0..x.wa.len()).collect();
    let all2: Vec<usize> = (0..y.wa.len()).collect();
    Ok(product_tv_aligned(&x, &y, &all1, &all2))
}

fn product_tv_aligned(x: &Aligned, y: &Aligned, w1: &[usize], w2: &[usize]) -> f64 {
    let rows: Vec<f64> = w1
        .iter()
        .map(|&i| {
            let terms: Vec<f64> = w2
                .iter()
                .map(|&j| (x.wa[i] * y.wa[j] - x.wb[i] * y.wb[j]).abs())
                .collect();
            pairwise_sum(&terms)
        })
        .collect();
    pairwise_sum(&rows)
}

/// Product total-variation norm restricted to `window1 × window2`. All four measures must
/// share one support per factor, since windows index into it.
pub fn product_tv_norm_on(
    a1: &DiscreteMeasure,
    a2: &DiscreteMeasure,
    b1: &DiscreteMeasure,
    b2: &DiscreteMeasure,
    window1: &[usize],
    window2: &[usize],
) -> Result<f64> {
    if !a1.same_support(b1) || !a2.same_support(b2) {
        return Err(Error::invalid("windowed norms need measures on a shared support"));
    }
    a1.window_mask(window1)?;
    a2.window_mask(window2)?;
    let x = align(a1, b1)?;
    let y = align(a2, b2)?;
    Ok(product_tv_aligned(&x, &y, window1, window2))
}

/// Product measure `a ⊗ b` on the concatenated coordinates.
pub fn product_measure(a: &DiscreteMeasure, b: &DiscreteMeasure) -> Result<DiscreteMeasure> {
    let mut coords = Vec::with_capacity(a.len() * b.len() * (a.dim + b.dim));
    let mut weights = Vec::with_capacity(a.len() * b.len());
    for i in 0..a.len() {
        for j in 0..b.len() {
            coords.extend_from_slice(a.point(i));
            coords.extend_from_slice(b.point(j));
            weights.push(a.weights[i] * b.weights[j]);
        }
    }
    DiscreteMeasure::from_flat(a.dim + b.dim, coords, weights, a.cell_volume * b.cell_volume)
}

/// Bounded-Lipschitz distance `sup { ∫ φ d(a - b) : |φ| ≤ 1, Lip(φ) ≤ 1 }` with respect to
/// the ℓ¹ metric on R^d.
///
/// The supremum is a finite linear program over the values of φ at the support points. It
/// is solved through its dual, a min-cost flow: support points are embedded in the tensor
/// grid spanned by their coordinates (whose axis-neighbour graph reproduces ℓ¹ distances
/// exactly), and an auxiliary ground node joined to every point at cost 1 absorbs the mass
/// imbalance and enforces `|φ| ≤ 1`.
pub fn bounded_lipschitz_distance(a: &DiscreteMeasure, b: &DiscreteMeasure) -> Result<f64> {
    let al = align(a, b)?;
    let c: Vec<f64> = al.wa.iter().zip(&al.wb).map(|(x, y)| x - y).collect();
    let n = c.len();
    let scale = c.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return Ok(0.0);
    }
    let d = al.dim;

    // Unique sorted coordinates per axis.
    let axes: Vec<Vec<f64>> = (0..d)
        .map(|k| {
            let mut v: Vec<f64> = (0..n).map(|i| al.coords[i * d + k]).collect();
            v.sort_by(|x, y| x.partial_cmp(y).unwrap());
            v.dedup();
            v
        })
        .collect();
    let tensor_nodes: f64 = axes.iter().map(|v| v.len() as f64).product();
    let tensor_arcs = 2.0 * d as f64 * tensor_nodes + 2.0 * tensor_nodes;
    let complete_arcs = (n as f64) * (n as f64 - 1.0) + 2.0 * n as f64;

    if tensor_arcs <= complete_arcs {
        let counts: Vec<usize> = axes.iter().map(|v| v.len()).collect();
        let total = tensor_nodes as usize;
        let ground = total;
        let mut flow = MinCostFlow::new(total + 1);
        // every pair of nodes is joined through the ground node at cost 2
        flow.set_artificial_cost(3.0);
        flow.set_initial_star(ground);
        let mut supply = vec![0.0; total + 1];
        for i in 0..n {
            let mut flat = 0;
            for k in 0..d {
                let v = al.coords[i * d + k];
                let pos = axes[k]
                    .binary_search_by(|x| x.partial_cmp(&v).unwrap())
                    .expect("coordinate present on its own axis");
                flat = flat * counts[k] + pos;
            }
            supply[flat] += c[i];
        }
        let mut strides = vec![1usize; d];
        for k in (0..d.saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * counts[k + 1];
        }
        for node in 0..total {
            let mut rem = node;
            for k in 0..d {
                let pos = (rem / strides[k]) % counts[k];
                rem %= strides[k];
                if pos + 1 < counts[k] {
                    let next = node + strides[k];
                    let gap = axes[k][pos + 1] - axes[k][pos];
                    flow.add_arc(node, next, gap);
                    flow.add_arc(next, node, gap);
                }
            }
            flow.add_arc(node, ground, 1.0);
            flow.add_arc(ground, node, 1.0);
        }
        supply[ground] = -supply[..total].iter().sum::<f64>();
        for (v, s) in supply.into_iter().enumerate() {
            flow.set_supply(v, s);
        }
        Ok(flow.solve()?.cost)
    } else {
        let ground = n;
        let mut flow = MinCostFlow::new(n + 1);
        flow.set_artificial_cost(3.0);
        flow.set_initial_star(ground);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let dist: f64 = (0..d)
                        .map(|k| (al.coords[i * d + k] - al.coords[j * d + k]).abs())
                        .sum();
                    if dist < 2.0 {
                        flow.add_arc(i, j, dist);
                    }
                }
            }
            flow.add_arc(i, ground, 1.0);
            flow.add_arc(ground, i, 1.0);
            flow.set_supply(i, c[i]);
        }
        flow.set_supply(ground, -c.iter().sum::<f64>());
        Ok(flow.solve()?.cost)
    }
}
