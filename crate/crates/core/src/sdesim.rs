//! Euler–Maruyama simulation of the reference diffusion and of the h-path bridge.
//!
//! Every path owns a ChaCha8 stream (`seed`, stream = path index), so ensembles are bitwise
//! reproducible whatever the thread count.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::hpath::BridgeModel;
use crate::kernel::TransitionKernel;
use crate::measure::{bounded_lipschitz_distance, tv_norm, DiscreteMeasure};
use crate::numerics::SpdMatrix;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
    /// Record every `record_stride` steps; 0 keeps only the initial and final states.
    pub record_stride: usize,
    /// Each Brownian increment is the sum of this many finer increments, so runs whose
    /// `dt / noise_refinement` agree share the same Brownian path.
    pub noise_refinement: usize,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self { n_paths: 10_000, dt: 1e-3, seed: 0, record_stride: 0, noise_refinement: 1 }
    }
}

impl SimulationConfig {
    /// Number of steps covering `[0, 1]`.
    pub fn steps(&self) -> Result<usize> {
        if self.n_paths == 0 {
            return Err(Error::invalid("n_paths must be positive"));
        }
        if self.noise_refinement == 0 {
            return Err(Error::invalid("noise_refinement must be at least 1"));
        }
        if !(self.dt > 0.0 && self.dt <= 1.0) {
            return Err(Error::invalid(format!("time step {} outside (0, 1]", self.dt)));
        }
        let n = (1.0 / self.dt).round();
        if (n * self.dt - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("time step {} does not divide [0, 1]", self.dt)));
        }
        Ok(n as usize)
    }

    fn record_steps(&self, n_steps: usize) -> Vec<usize> {
        let mut out = vec![0];
        if self.record_stride > 0 {
            out.extend((1..n_steps).filter(|j| j % self.record_stride == 0));
        }
        out.push(n_steps);
        out
    }
}

/// Scaling of the bridge control `a ∇log h`; 1 is the bridge itself.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlSpec {
    pub scale: f64,
}

impl Default for ControlSpec {
    fn default() -> Self {
        Self { scale: 1.0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PathEnsemble {
    pub dim: usize,
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
    pub record_times: Vec<f64>,
    /// `[record][path][component]`.
    pub states: Vec<f64>,
    /// `∫ γᵀ a⁻¹ γ dt` per path (empty for reference runs).
    pub control_cost: Vec<f64>,
    /// Drift lookups that fell outside the grid hull and used the nearest hull value.
    pub hull_clamps: u64,
    pub warnings: Vec<String>,
}

impl PathEnsemble {
    pub fn record(&self, k: usize) -> &[f64] {
        let w = self.n_paths * self.dim;
        &self.states[k * w..(k + 1) * w]
    }

    /// Index of the record at time `t`, if `t` was recorded.
    pub fn record_index(&self, t: f64) -> Option<usize> {
        self.record_times.iter().position(|&r| (r - t).abs() <= 1e-12)
    }

    /// Fraction of drift lookups that fell outside the grid hull.
    pub fn out_of_hull_fraction(&self) -> f64 {
        let steps = (1.0 / self.dt).round();
        self.hull_clamps as f64 / (self.n_paths as f64 * steps)
    }

    pub fn initial_states(&self) -> &[f64] {
        self.record(0)
    }

    pub fn final_states(&self) -> &[f64] {
        self.record(self.record_times.len() - 1)
    }

    /// Sample mean and standard error of the per-path control cost.
    pub fn cost_statistics(&self) -> Option<(f64, f64)> {
        let n = self.control_cost.len();
        if n < 2 {
            return None;
        }
        let mean = self.control_cost.iter().sum::<f64>() / n as f64;
        let var = self.control_cost.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        Some((mean, (var / n as f64).sqrt()))
    }

    /// Little-endian dump: `u64` path count, record count and dimension, then the states.
    pub fn write_binary<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for v in [self.n_paths, self.record_times.len(), self.dim] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        for s in &self.states {
            w.write_all(&s.to_le_bytes())?;
        }
        w.flush()
    }

    /// Read a dump written by [`write_binary`](Self::write_binary): `(n_paths, n_records, dim, states)`.
    pub fn read_binary<R: Read>(mut r: R) -> std::io::Result<(usize, usize, usize, Vec<f64>)> {
        let mut b = [0u8; 8];
        let mut header = [0usize; 3];
        for h in header.iter_mut() {
            r.read_exact(&mut b)?;
            *h = u64::from_le_bytes(b) as usize;
        }
        let n = header[0] * header[1] * header[2];
        let mut states = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut b)?;
            states.push(f64::from_le_bytes(b));
        }
        Ok((header[0], header[1], header[2], states))
    }
}

/// Inverse-CDF sampler for a discrete measure, jittered uniformly inside the grid cell when
/// the measure is a density.
struct InitialSampler<'a> {
    measure: &'a DiscreteMeasure,
    cdf: Vec<f64>,
    half_cell: Option<Vec<f64>>,
}

impl<'a> InitialSampler<'a> {
    fn new(measure: &'a DiscreteMeasure, grid: Option<&Grid>) -> Result<Self> {
        let total = measure.total_mass();
        if !(total > 0.0) {
            return Err(Error::invalid("initial law has no mass"));
        }
        let mut acc = 0.0;
        let cdf = measure
            .weights()
            .iter()
            .map(|w| {
                acc += w / total;
                acc
            })
            .collect();
        let half_cell = match (measure.is_atomic(), grid) {
            (false, Some(g)) => Some((0..g.dim()).map(|k| 0.5 * g.spacing(k)).collect()),
            _ => None,
        };
        Ok(Self { measure, cdf, half_cell })
    }

    fn sample(&self, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        let u: f64 = rng.random();
        let i = self.cdf.partition_point(|&c| c <= u).min(self.cdf.len() - 1);
        // skip trailing zero-weight points the search can land on when u rounds to the top
        let i = if self.measure.weights()[i] == 0.0 {
            (0..=i).rev().find(|&j| self.measure.weights()[j] > 0.0).unwrap_or(i)
        } else {
            i
        };
        out.copy_from_slice(self.measure.point(i));
        if let Some(h) = &self.half_cell {
            for (k, o) in out.iter_mut().enumerate() {
                let v: f64 = rng.random();
                *o += (2.0 * v - 1.0) * h[k];
            }
        }
    }
}

struct PathOutput {
    states: Vec<f64>,
    cost: f64,
    clamps: u64,
}

/// Shared Euler–Maruyama loop. `drift(j, x, out, grad)` writes the drift at step `j` and, for
/// controlled runs, the control cost rate; it returns whether the lookup was clamped.
fn run<F>(
    dim: usize,
    sampler: &InitialSampler,
    sigma: &SpdMatrix,
    cfg: &SimulationConfig,
    drift: F,
) -> Result<(Vec<PathOutput>, Vec<usize>, usize)>
where
    F: Fn(usize, &[f64], &mut [f64]) -> (f64, bool) + Sync,
{
    let n_steps = cfg.steps()?;
    let records = cfg.record_steps(n_steps);
    let m = cfg.noise_refinement;
    let sub_sd = (cfg.dt / m as f64).sqrt();
    let outputs: Vec<PathOutput> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(p as u64);
            let mut x = vec![0.0; dim];
            sampler.sample(&mut rng, &mut x);
            let mut b = vec![0.0; dim];
            let mut z = vec![0.0; dim];
            let mut dw = vec![0.0; dim];
            let mut states = Vec::with_capacity(records.len() * dim);
            states.extend_from_slice(&x);
            let mut next_record = 1;
            let mut cost = 0.0;
            let mut clamps = 0u64;
            for j in 0..n_steps {
                let (rate, clamped) = drift(j, &x, &mut b);
                cost += rate * cfg.dt;
                clamps += clamped as u64;
                for v in z.iter_mut() {
                    *v = 0.0;
                }
                for _ in 0..m {
                    for v in z.iter_mut() {
                        let e: f64 = rng.sample(StandardNormal);
                        *v += sub_sd * e;
                    }
                }
                sigma.chol_apply(&z, &mut dw);
                for k in 0..dim {
                    x[k] += b[k] * cfg.dt + dw[k];
                }
                if records[next_record] == j + 1 {
                    states.extend_from_slice(&x);
                    next_record += 1;
                }
            }
            PathOutput { states, cost, clamps }
        })
        .collect();
    Ok((outputs, records, n_steps))
}

fn assemble(
    dim: usize,
    cfg: &SimulationConfig,
    outputs: Vec<PathOutput>,
    records: Vec<usize>,
    n_steps: usize,
    controlled: bool,
) -> PathEnsemble {
    let n = cfg.n_paths;
    let hull_clamps: u64 = outputs.iter().map(|o| o.clamps).sum();
    let fraction = hull_clamps as f64 / (n as f64 * n_steps as f64);
    let mut warnings = Vec::new();
    if fraction > 0.01 {
        warnings.push(format!("{:.2}% of drift lookups fell outside the grid hull", 100.0 * fraction));
    }
    let mut states = vec![0.0; records.len() * n * dim];
    for (p, out) in outputs.iter().enumerate() {
        for r in 0..records.len() {
            let dst = (r * n + p) * dim;
            states[dst..dst + dim].copy_from_slice(&out.states[r * dim..(r + 1) * dim]);
        }
    }
    PathEnsemble {
        dim,
        n_paths: n,
        dt: cfg.dt,
        seed: cfg.seed,
        record_times: records.iter().map(|&j| j as f64 / n_steps as f64).collect(),
        states,
        control_cost: if controlled { outputs.iter().map(|o| o.cost).collect() } else { Vec::new() },
        hull_clamps,
        warnings,
    }
}

/// Simulate the reference diffusion started from `p0` (jittered within `grid` cells when given).
pub fn simulate_reference(
    transition: &TransitionKernel,
    p0: &DiscreteMeasure,
    grid: Option<&Grid>,
    cfg: &SimulationConfig,
) -> Result<PathEnsemble> {
    let dim = p0.dim();
    transition.validate(dim)?;
    let sigma = SpdMatrix::new(&transition.diffusion(dim)?)
        .ok_or_else(|| Error::invalid("diffusion matrix must be positive definite"))?;
    let sampler = InitialSampler::new(p0, grid)?;
    let (c, theta) = transition.drift_affine(dim)?;
    let (out, records, n_steps) = run(dim, &sampler, &sigma, cfg, |_, x, b| {
        for k in 0..x.len() {
            b[k] = c[k] - theta * x[k];
        }
        (0.0, false)
    })?;
    Ok(assemble(dim, cfg, out, records, n_steps, false))
}

/// Simulate the bridge with drift `b + scale · a ∇log h`, interpolating the tabulated
/// `∇log h` at the left end of each step.
pub fn simulate_bridge(model: &BridgeModel, cfg: &SimulationConfig, control: &ControlSpec) -> Result<PathEnsemble> {
    let n_steps = cfg.steps()?;
    let grid = model.grid();
    let dim = grid.dim();
    let tables = drift_tables(model, n_steps)?;
    let sampler = InitialSampler::new(model.p0(), Some(grid))?;
    let a = model.diffusion();
    let a_mat = model.diffusion_matrix();
    let scale = control.scale;
    let (c, theta) = model.transition().drift_affine(dim)?;
    let one_d = dim == 1;
    let (lo, dx, npts) = (grid.lower()[0], grid.spacing(0), grid.counts()[0]);
    let (out, records, n_steps) = run(dim, &sampler, a_mat, cfg, |j, x, b| {
        let row = &tables[j];
        let clamped = !grid.contains(x);
        if one_d {
            let s = ((x[0] - lo) / dx).clamp(0.0, (npts - 1) as f64);
            let i = (s as usize).min(npts - 2);
            let f = s - i as f64;
            let g = row[i] + f * (row[i + 1] - row[i]);
            let gamma = scale * a[0][0] * g;
            b[0] = c[0] - theta * x[0] + gamma;
            return (gamma * gamma / a[0][0], clamped);
        }
        let g: Vec<f64> = (0..dim).map(|k| grid.interpolate(row, dim, k, x)).collect();
        let gamma: Vec<f64> = (0..dim)
            .map(|k| scale * (0..dim).map(|l| a[k][l] * g[l]).sum::<f64>())
            .collect();
        for k in 0..dim {
            b[k] = c[k] - theta * x[k] + gamma[k];
        }
        (a_mat.inv_quad(&gamma), clamped)
    })?;
    Ok(assemble(dim, cfg, out, records, n_steps, true))
}

/// `∇log h` on the grid at each simulation time `j / n_steps`, reusing model rows when the
/// time grids nest.
fn drift_tables(model: &BridgeModel, n_steps: usize) -> Result<Vec<Vec<f64>>> {
    let k = model.times().len();
    if k % n_steps == 0 {
        let ratio = k / n_steps;
        return Ok((0..n_steps).map(|j| model.grad_log_h_row(j * ratio).to_vec()).collect());
    }
    let points = model.grid().points();
    (0..n_steps)
        .into_par_iter()
        .map(|j| {
            let t = j as f64 / n_steps as f64;
            let mut row = Vec::with_capacity(points.len() * model.grid().dim());
            for p in &points {
                row.extend(model.grad_log_h_at(t, p)?);
            }
            Ok(row)
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MarginalCheck {
    pub t: f64,
    /// `Σ |empirical - target|` over grid cells, with samples outside the hull counted as
    /// unmatched mass.
    pub tv: f64,
    /// Bounded-Lipschitz distance between the cell histogram and the target.
    pub bl: f64,
    pub outside_fraction: f64,
    pub samples: usize,
    pub threshold: f64,
    pub passed: bool,
}

/// Histogram the states recorded at time `t` on the nearest cells of `grid` and compare with
/// `target`; passes when the TV distance is at most `threshold`.
pub fn empirical_marginal_check(
    ensemble: &PathEnsemble,
    t: f64,
    grid: &Grid,
    target: &DiscreteMeasure,
    threshold: f64,
) -> Result<MarginalCheck> {
    let k = ensemble
        .record_index(t)
        .ok_or_else(|| Error::invalid(format!("time {t} is not on the recorded trajectory grid")))?;
    let (emp, outside) = histogram(ensemble.record(k), ensemble.dim, grid, target)?;
    let tv = tv_norm(&emp, target)? + outside;
    let bl = bounded_lipschitz_distance(&emp, target)?;
    Ok(MarginalCheck {
        t,
        tv,
        bl,
        outside_fraction: outside,
        samples: ensemble.n_paths,
        threshold,
        passed: tv <= threshold,
    })
}

/// Empirical measure of `states` on the nearest cells of `grid` (weights sum to the inside
/// fraction), and the fraction of samples more than half a cell outside the hull.
pub fn histogram(states: &[f64], dim: usize, grid: &Grid, target: &DiscreteMeasure) -> Result<(DiscreteMeasure, f64)> {
    if target.len() != grid.len() || target.dim() != dim || grid.dim() != dim {
        return Err(Error::invalid("target must live on the histogram grid"));
    }
    let n = states.len() / dim;
    if n == 0 {
        return Err(Error::invalid("no samples"));
    }
    let mut counts = vec![0.0; grid.len()];
    let mut outside = 0usize;
    let half: Vec<f64> = (0..dim).map(|k| 0.5 * grid.spacing(k)).collect();
    for s in states.chunks(dim) {
        let inside = (0..dim).all(|k| s[k] >= grid.lower()[k] - half[k] && s[k] < grid.upper()[k] + half[k]);
        if inside {
            counts[grid.nearest(s)] += 1.0 / n as f64;
        } else {
            outside += 1;
        }
    }
    Ok((target.with_weights(counts)?, outside as f64 / n as f64))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CostReport {
    /// Monte Carlo mean of `∫ γᵀ a⁻¹ γ dt`.
    pub mean_cost: f64,
    pub std_error: f64,
    /// Half of `mean_cost`.
    pub half_cost: f64,
    /// `Δ = ∫ log h(1,·) dP₁ - ∫ log h(0,·) dP₀`, the relative entropy of the bridge.
    pub delta: f64,
    /// `½ · mean_cost / Δ`; undefined when `Δ` vanishes.
    pub half_ratio: Option<f64>,
    /// `mean_cost / Δ`.
    pub full_ratio: Option<f64>,
    /// Standard error of `half_ratio`.
    pub half_ratio_std_error: Option<f64>,
}

pub fn control_cost_report(ensemble: &PathEnsemble, model: &BridgeModel) -> Result<CostReport> {
    let (mean_cost, std_error) = ensemble
        .cost_statistics()
        .ok_or_else(|| Error::invalid("ensemble carries no control cost"))?;
    let delta = model.relative_entropy();
    let defined = delta.abs() > 1e-12;
    Ok(CostReport {
        mean_cost,
        std_error,
        half_cost: 0.5 * mean_cost,
        delta,
        half_ratio: defined.then(|| 0.5 * mean_cost / delta),
        full_ratio: defined.then(|| mean_cost / delta),
        half_ratio_std_error: defined.then(|| 0.5 * std_error / delta.abs()),
    })
}
