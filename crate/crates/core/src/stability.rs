//! Continuity of the solution map `(q, μ₁, μ₂) ↦ (ν₁, ν₂, u₁, u₂)` and the exhaustion of a
//! grid by increasing windows.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::kernel::{KernelBounds, KernelMatrix};
use crate::measure::{bounded_lipschitz_distance, product_tv_norm, product_tv_norm_on, DiscreteMeasure};
use crate::numerics::linear_fit;
use crate::solver::{solve, SchrodingerSolution, SolverConfig};

/// A kernel matrix with its two marginals.
#[derive(Clone, Debug)]
pub struct Problem {
    pub q: KernelMatrix,
    pub mu1: DiscreteMeasure,
    pub mu2: DiscreteMeasure,
}

impl Problem {
    pub fn new(q: KernelMatrix, mu1: DiscreteMeasure, mu2: DiscreteMeasure) -> Result<Self> {
        if q.rows() != mu1.len() || q.cols() != mu2.len() {
            return Err(Error::invalid("kernel shape does not match the marginals"));
        }
        Ok(Self { q, mu1, mu2 })
    }

    pub fn solve(&self, cfg: &SolverConfig) -> Result<SchrodingerSolution> {
        solve(&self.q, &self.mu1, &self.mu2, cfg)
    }
}

/// Log-spaced parameters from `hi` down to `lo` (inclusive).
pub fn geometric_levels(hi: f64, lo: f64, count: usize) -> Vec<f64> {
    if count <= 1 {
        return vec![hi];
    }
    let (a, b) = (hi.ln(), lo.ln());
    (0..count)
        .map(|k| (a + (b - a) * k as f64 / (count - 1) as f64).exp())
        .collect()
}

#[derive(Clone, Debug)]
pub struct PerturbationFamily {
    pub name: String,
    pub base: Problem,
    pub variants: Vec<Problem>,
    /// Generator parameter of each variant.
    pub parameters: Vec<f64>,
    /// `||μ₁ₙ ⊗ μ₂ₙ - μ₁ ⊗ μ₂||`.
    pub marginal_deltas: Vec<f64>,
    /// `||qₙ - q||_∞`.
    pub kernel_deltas: Vec<f64>,
    /// Row-grid index at which potentials are compared pointwise, per variant.
    pub probes: Vec<usize>,
    /// Row-grid index of the limit point.
    pub base_probe: usize,
}

impl PerturbationFamily {
    pub fn new(name: &str, base: Problem, variants: Vec<Problem>, parameters: Vec<f64>) -> Result<Self> {
        if variants.len() != parameters.len() {
            return Err(Error::invalid("one parameter per variant is required"));
        }
        let mut marginal_deltas = Vec::with_capacity(variants.len());
        let mut kernel_deltas = Vec::with_capacity(variants.len());
        for (n, v) in variants.iter().enumerate() {
            if !v.mu1.same_support(&base.mu1) || !v.mu2.same_support(&base.mu2) {
                return Err(Error::Variant {
                    index: n,
                    source: Box::new(Error::invalid("variant lives on a different grid")),
                });
            }
            marginal_deltas.push(product_tv_norm(&v.mu1, &v.mu2, &base.mu1, &base.mu2)?);
            kernel_deltas.push(v.q.sup_distance(&base.q)?);
        }
        let total: Vec<f64> = marginal_deltas.iter().zip(&kernel_deltas).map(|(a, b)| a + b).collect();
        if let Some(k) = (1..total.len()).find(|&k| total[k] > total[k - 1] * (1.0 + 1e-12)) {
            return Err(Error::invalid(format!(
                "family deltas must be nonincreasing (level {k}: {} > {})",
                total[k],
                total[k - 1]
            )));
        }
        let mid = base.mu1.len() / 2;
        Ok(Self {
            name: name.to_string(),
            probes: vec![mid; variants.len()],
            base_probe: mid,
            base,
            variants,
            parameters,
            marginal_deltas,
            kernel_deltas,
        })
    }

    pub fn deltas(&self) -> Vec<f64> {
        self.marginal_deltas.iter().zip(&self.kernel_deltas).map(|(a, b)| a + b).collect()
    }

    /// `qₙ = (1 + εₙ) q`.
    pub fn kernel_scaling(base: &Problem, eps: &[f64]) -> Result<Self> {
        let variants = eps
            .iter()
            .map(|e| Problem::new(base.q.scaled(1.0 + e), base.mu1.clone(), base.mu2.clone()))
            .collect::<Result<_>>()?;
        Self::new("kernel_scaling", base.clone(), variants, eps.to_vec())
    }

    /// `qₙ = (1 - εₙ) q + εₙ Mq`, with `M` the three-point moving average along both grid
    /// orderings.
    pub fn kernel_mollification(base: &Problem, eps: &[f64]) -> Result<Self> {
        let (r, c) = (base.q.rows(), base.q.cols());
        let smooth: Vec<f64> = (0..r * c)
            .map(|k| {
                let (i, j) = (k / c, k % c);
                let mut s = 0.0;
                let mut cnt = 0.0;
                for ii in i.saturating_sub(1)..=(i + 1).min(r - 1) {
                    for jj in j.saturating_sub(1)..=(j + 1).min(c - 1) {
                        s += base.q.get(ii, jj);
                        cnt += 1.0;
                    }
                }
                s / cnt
            })
            .collect();
        let variants = eps
            .iter()
            .map(|&e| {
                let q = base
                    .q
                    .map_log(|i, j, lq| ((1.0 - e) * lq.exp() + e * smooth[i * c + j]).ln())?;
                Problem::new(q, base.mu1.clone(), base.mu2.clone())
            })
            .collect::<Result<_>>()?;
        Self::new("kernel_mollification", base.clone(), variants, eps.to_vec())
    }

    /// `μ₁ₙ = (1 - εₙ) μ₁ + εₙ μ₁'` and, if `other2` is given, the same for `μ₂`.
    pub fn marginal_mixture(
        base: &Problem,
        other1: &DiscreteMeasure,
        other2: Option<&DiscreteMeasure>,
        eps: &[f64],
    ) -> Result<Self> {
        let mix = |mu: &DiscreteMeasure, other: &DiscreteMeasure, e: f64| -> Result<DiscreteMeasure> {
            if !mu.same_support(other) {
                return Err(Error::invalid("mixture component must share the marginal's grid"));
            }
            mu.with_weights(
                mu.weights()
                    .iter()
                    .zip(other.weights())
                    .map(|(a, b)| (1.0 - e) * a + e * b)
                    .collect(),
            )
        };
        let variants = eps
            .iter()
            .map(|&e| {
                let m1 = mix(&base.mu1, other1, e)?;
                let m2 = match other2 {
                    Some(o) => mix(&base.mu2, o, e)?,
                    None => base.mu2.clone(),
                };
                Problem::new(base.q.clone(), m1, m2)
            })
            .collect::<Result<_>>()?;
        let name = if other2.is_some() { "marginal_mixture_both" } else { "marginal_mixture" };
        Self::new(name, base.clone(), variants, eps.to_vec())
    }

    /// Both marginals dilated by `1 + εₙ` about `centre`: the density at `x` becomes
    /// `ρ(centre + (x - centre)/(1 + εₙ))`, interpolated multilinearly on `grid` and renormalised.
    pub fn support_dilation(base: &Problem, grid: &Grid, centre: &[f64], eps: &[f64]) -> Result<Self> {
        if base.mu1.len() != grid.len() || base.mu2.len() != grid.len() {
            return Err(Error::invalid("support dilation needs both marginals on the given grid"));
        }
        let dilate = |mu: &DiscreteMeasure, e: f64| -> Result<DiscreteMeasure> {
            let w: Vec<f64> = (0..grid.len())
                .map(|i| {
                    let x: Vec<f64> = mu
                        .point(i)
                        .iter()
                        .zip(centre)
                        .map(|(x, c)| c + (x - c) / (1.0 + e))
                        .collect();
                    grid.interpolate(mu.weights(), 1, 0, &x).max(0.0)
                })
                .collect();
            mu.with_weights(w)?.normalized()
        };
        let variants = eps
            .iter()
            .map(|&e| Problem::new(base.q.clone(), dilate(&base.mu1, e)?, dilate(&base.mu2, e)?))
            .collect::<Result<_>>()?;
        Self::new("support_dilation", base.clone(), variants, eps.to_vec())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StabilityLevel {
    pub index: usize,
    pub parameter: f64,
    pub marginal_delta: f64,
    pub kernel_delta: f64,
    pub delta: f64,
    /// `||ν₁ₙ ⊗ ν₂ₙ - ν₁ ⊗ ν₂||`.
    pub solution_delta: f64,
    /// `||u₁ₙ - u₁||_∞ + ||u₂ₙ - u₂||_∞`.
    pub u_sup_distance: f64,
    /// `|u₁ₙ(xₙ) - u₁(x)| + |u₂ₙ(xₙ) - u₂(x)|` along the family's probe sequence.
    pub u_pointwise_distance: f64,
    pub iterations: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StabilityReport {
    pub family: String,
    pub bounds: KernelBounds,
    pub levels: Vec<StabilityLevel>,
    /// All three distance sequences are nonincreasing up to `slack`.
    pub monotone: bool,
    pub slack: f64,
}

impl StabilityReport {
    pub fn final_level(&self) -> Option<&StabilityLevel> {
        self.levels.last()
    }

    /// True when every distance at the last level is at most `target`.
    pub fn converged_below(&self, target: f64) -> bool {
        self.final_level().is_some_and(|l| {
            l.solution_delta <= target && l.u_sup_distance <= target && l.u_pointwise_distance <= target
        })
    }
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Solve the base problem and every variant, recording input and output distances.
pub fn stability_experiment(fam: &PerturbationFamily, cfg: &SolverConfig) -> Result<StabilityReport> {
    let base = fam.base.solve(cfg)?;
    let sols: Vec<Result<SchrodingerSolution>> = fam.variants.par_iter().map(|v| v.solve(cfg)).collect();
    let mut levels = Vec::with_capacity(sols.len());
    for (n, sol) in sols.into_iter().enumerate() {
        let sol = sol.map_err(|e| Error::Variant { index: n, source: Box::new(e) })?;
        let (p, p0) = (fam.probes[n], fam.base_probe);
        levels.push(StabilityLevel {
            index: n,
            parameter: fam.parameters[n],
            marginal_delta: fam.marginal_deltas[n],
            kernel_delta: fam.kernel_deltas[n],
            delta: fam.marginal_deltas[n] + fam.kernel_deltas[n],
            solution_delta: product_tv_norm(&sol.nu1, &sol.nu2, &base.nu1, &base.nu2)?,
            u_sup_distance: sup_diff(&sol.u1, &base.u1) + sup_diff(&sol.u2, &base.u2),
            u_pointwise_distance: (sol.u1[p] - base.u1[p0]).abs()
                + (sol.u2[p.min(sol.u2.len() - 1)] - base.u2[p0.min(base.u2.len() - 1)]).abs(),
            iterations: sol.iterations,
        });
    }
    let slack = 10.0 * cfg.tol;
    let mono = |f: fn(&StabilityLevel) -> f64| levels.windows(2).all(|w| f(&w[1]) <= f(&w[0]) + slack);
    let monotone = mono(|l| l.solution_delta) && mono(|l| l.u_sup_distance) && mono(|l| l.u_pointwise_distance);
    Ok(StabilityReport {
        family: fam.name.clone(),
        bounds: fam.base.q.bounds(),
        levels,
        monotone,
        slack,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HolderFit {
    /// Least-squares slope of `log(solution delta)` against `log(marginal delta)`.
    pub slope: f64,
    pub intercept: f64,
    /// Smallest `C` with `solution delta ≤ C √(marginal delta)` at every point.
    pub c_hat: f64,
    pub points_used: usize,
    /// Decades spanned by the marginal deltas.
    pub decades: f64,
    pub envelope_holds: bool,
}

/// Fit `(marginal delta, solution delta)` pairs; see [`HolderFit`].
pub fn holder_fit_points(points: &[(f64, f64)]) -> Result<HolderFit> {
    if points.len() < 3 {
        return Err(Error::DegenerateRegression(format!("{} points, need at least 3", points.len())));
    }
    let mut c_hat = 0.0f64;
    for &(d, s) in points {
        if d > 0.0 {
            c_hat = c_hat.max(s / d.sqrt());
        } else if s > 0.0 {
            return Err(Error::DegenerateRegression("solution moved under a zero perturbation".into()));
        }
    }
    let logs: Vec<(f64, f64)> = points
        .iter()
        .filter(|(d, s)| *d > 0.0 && *s > 0.0)
        .map(|(d, s)| (d.ln(), s.ln()))
        .collect();
    if logs.len() < 3 {
        return Err(Error::DegenerateRegression("fewer than 3 points with positive deltas".into()));
    }
    let xs: Vec<f64> = logs.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = logs.iter().map(|p| p.1).collect();
    let (slope, intercept) =
        linear_fit(&xs, &ys).ok_or_else(|| Error::DegenerateRegression("deltas have zero spread".into()))?;
    let (lo, hi) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let envelope_holds = points
        .iter()
        .all(|&(d, s)| s <= c_hat * d.sqrt() * (1.0 + 1e-12));
    Ok(HolderFit {
        slope,
        intercept,
        c_hat,
        points_used: logs.len(),
        decades: (hi - lo) / std::f64::consts::LN_10,
        envelope_holds,
    })
}

/// Hölder fit of a marginal-only family.
pub fn holder_exponent_fit(report: &StabilityReport) -> Result<HolderFit> {
    if report.levels.iter().any(|l| l.kernel_delta != 0.0) {
        return Err(Error::invalid("the Hölder fit needs a fixed kernel across the family"));
    }
    let pts: Vec<(f64, f64)> = report.levels.iter().map(|l| (l.marginal_delta, l.solution_delta)).collect();
    holder_fit_points(&pts)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RestrictionCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// Both sides of
/// `||μ₁ₙ|ₖ ⊗ μ₂ₙ|ₖ - μ₁|ₖ ⊗ μ₂|ₖ||ₖ ≤ 2 ||μ₁ₙ ⊗ μ₂ₙ - μ₁ ⊗ μ₂||ₖ / (μ₁(Aₖ) μ₂(Aₖ))`,
/// where `||·||ₖ` is the total variation on `Aₖ × Aₖ`.
pub fn restriction_inequality(
    mu1n: &DiscreteMeasure,
    mu2n: &DiscreteMeasure,
    mu1: &DiscreteMeasure,
    mu2: &DiscreteMeasure,
    window1: &[usize],
    window2: &[usize],
) -> Result<RestrictionCheck> {
    let lhs = product_tv_norm_on(
        &mu1n.restrict(window1)?,
        &mu2n.restrict(window2)?,
        &mu1.restrict(window1)?,
        &mu2.restrict(window2)?,
        window1,
        window2,
    )?;
    let rhs = 2.0 * product_tv_norm_on(mu1n, mu2n, mu1, mu2, window1, window2)?
        / (mu1.mass_on(window1) * mu2.mass_on(window2));
    Ok(RestrictionCheck { lhs, rhs, holds: lhs <= rhs * (1.0 + 1e-12) + 1e-15 })
}

/// Increasing windows `A₁ ⊂ A₂ ⊂ …` covering a grid shared by both marginals.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExhaustionScheme {
    pub windows: Vec<Vec<usize>>,
    /// First (1-based) window index carrying positive mass under both marginals.
    pub n0: usize,
}

impl ExhaustionScheme {
    pub fn new(mut windows: Vec<Vec<usize>>, mu1: &DiscreteMeasure, mu2: &DiscreteMeasure) -> Result<Self> {
        if !mu1.same_support(mu2) {
            return Err(Error::invalid("exhaustion needs both marginals on one grid"));
        }
        if windows.is_empty() {
            return Err(Error::invalid("no windows given"));
        }
        let n = mu1.len();
        for w in &mut windows {
            w.sort_unstable();
            w.dedup();
            if w.last().is_some_and(|&i| i >= n) {
                return Err(Error::invalid("window index out of range"));
            }
        }
        for k in 1..windows.len() {
            let prev = &windows[k - 1];
            if !prev.iter().all(|i| windows[k].binary_search(i).is_ok()) {
                return Err(Error::invalid(format!("window {} is not contained in window {}", k, k + 1)));
            }
        }
        if windows.last().map(|w| w.len()) != Some(n) {
            return Err(Error::invalid("the last window must cover the whole grid"));
        }
        let n0 = windows
            .iter()
            .position(|w| mu1.mass_on(w) > 0.0 && mu2.mass_on(w) > 0.0)
            .map(|p| p + 1)
            .ok_or(Error::EmptyRestriction)?;
        Ok(Self { windows, n0 })
    }

    /// Centred boxes of the given half-widths on `grid`, with the full grid appended if the
    /// last box does not already cover it.
    pub fn boxes(grid: &Grid, centre: &[f64], half_widths: &[f64]) -> Vec<Vec<usize>> {
        let mut w: Vec<Vec<usize>> = half_widths.iter().map(|&h| grid.box_window(centre, h)).collect();
        if w.last().map(|l| l.len()) != Some(grid.len()) {
            w.push((0..grid.len()).collect());
        }
        w
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExhaustionLevel {
    /// 1-based window index.
    pub n: usize,
    pub window_size: usize,
    pub mass1: f64,
    pub mass2: f64,
    pub iterations: usize,
    pub marginal_residual: f64,
    /// Bounded-Lipschitz distance from the windowed coupling to the full coupling.
    pub bl_distance: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExhaustionReport {
    pub n0: usize,
    pub levels: Vec<ExhaustionLevel>,
    /// Distances are nonincreasing up to `slack`.
    pub monotone: bool,
    pub slack: f64,
}

/// Solve on each requested window (1-based indices; all windows from `n0` if empty) with
/// restricted marginals and compare the coupling `q 1_{Aₙ×Aₙ} ν₁|ₙ ⊗ ν₂|ₙ` with the full-grid
/// coupling `q ν₁ ⊗ ν₂`.
pub fn exhaustion_solve(
    q_full: &KernelMatrix,
    mu1: &DiscreteMeasure,
    mu2: &DiscreteMeasure,
    scheme: &ExhaustionScheme,
    cfg: &SolverConfig,
    requested: &[usize],
) -> Result<(Vec<SchrodingerSolution>, ExhaustionReport)> {
    let levels: Vec<usize> = if requested.is_empty() {
        (scheme.n0..=scheme.windows.len()).collect()
    } else {
        requested.to_vec()
    };
    for &n in &levels {
        if n < scheme.n0 {
            return Err(Error::BelowN0 { requested: n, n0: scheme.n0 });
        }
        if n > scheme.windows.len() {
            return Err(Error::invalid(format!("window {n} does not exist")));
        }
    }
    let full = solve(q_full, mu1, mu2, cfg)?;
    let n1 = mu1.len();
    let n2 = mu2.len();
    let d = mu1.dim() + mu2.dim();
    let mut coords = Vec::with_capacity(n1 * n2 * d);
    for i in 0..n1 {
        for j in 0..n2 {
            coords.extend_from_slice(mu1.point(i));
            coords.extend_from_slice(mu2.point(j));
        }
    }
    let vol = mu1.cell_volume() * mu2.cell_volume();
    let coupling = |w: Vec<f64>| DiscreteMeasure::from_flat(d, coords.clone(), w, vol);
    let full_weights: Vec<f64> = (0..n1 * n2)
        .map(|k| {
            let (i, j) = (k / n2, k % n2);
            q_full.get(i, j) * full.nu1.weights()[i] * full.nu2.weights()[j]
        })
        .collect();
    let full_coupling = coupling(full_weights)?;

    let mut sols = Vec::with_capacity(levels.len());
    let mut out = Vec::with_capacity(levels.len());
    for &n in &levels {
        let w = &scheme.windows[n - 1];
        let r1 = mu1.restrict(w)?.subset(w)?;
        let r2 = mu2.restrict(w)?.subset(w)?;
        let sub = q_full.submatrix(w, w);
        let sol = solve(&sub, &r1, &r2, cfg).map_err(|e| Error::Variant { index: n, source: Box::new(e) })?;
        let mut weights = vec![0.0; n1 * n2];
        for (a, &i) in w.iter().enumerate() {
            for (b, &j) in w.iter().enumerate() {
                weights[i * n2 + j] = sub.get(a, b) * sol.nu1.weights()[a] * sol.nu2.weights()[b];
            }
        }
        let bl = bounded_lipschitz_distance(&coupling(weights)?, &full_coupling)?;
        out.push(ExhaustionLevel {
            n,
            window_size: w.len(),
            mass1: mu1.mass_on(w),
            mass2: mu2.mass_on(w),
            iterations: sol.iterations,
            marginal_residual: sol.marginal_residual,
            bl_distance: bl,
        });
        sols.push(sol);
    }
    let slack = 1e-9;
    let monotone = out.windows(2).all(|p| p[1].bl_distance <= p[0].bl_distance + slack);
    Ok((sols, ExhaustionReport { n0: scheme.n0, levels: out, monotone, slack }))
}
