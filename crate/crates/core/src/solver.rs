//! Schrödinger's functional equation on a finite grid.
//!
//! Given a positive kernel matrix `Q` and probability marginals `μ₁, μ₂`, find factor
//! measures `ν₁, ν₂` with
//!
//! ```text
//! μ₁(dx) = ν₁(dx) ∫ q(x, y) ν₂(dy),    μ₂(dy) = ν₂(dy) ∫ q(x, y) ν₁(dx),
//! ```
//!
//! normalised so that `ν₁(S) = ν₂(S)`. Potentials are `u₁(x) = log ∫ q(x, y) ν₂(dy)` and
//! `u₂(y) = log ∫ q(x, y) ν₁(dx)`, so that `μᵢ = exp(uᵢ) νᵢ`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{KernelBounds, KernelMatrix};
use crate::measure::{tv_norm, DiscreteMeasure};
use crate::numerics::{log_sum_exp_by, pairwise_sum};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub log_domain: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 10_000, log_domain: true }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(Error::invalid(format!("solver.tol must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("solver.max_iter must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SchrodingerSolution {
    pub nu1: DiscreteMeasure,
    pub nu2: DiscreteMeasure,
    pub u1: Vec<f64>,
    pub u2: Vec<f64>,
    pub iterations: usize,
    /// Larger of the two marginal residuals.
    pub marginal_residual: f64,
    pub residuals: [f64; 2],
    /// Common mass `ν₁(S) = ν₂(S)`.
    pub normalization_mass: f64,
}

/// Diagnostics for a candidate solution.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SolutionReport {
    /// TV residuals `||ν₁ ∫q dν₂ - μ₁||` and `||ν₂ ∫q dν₁ - μ₂||`.
    pub residuals: [f64; 2],
    /// Violation of `1/√M_q ≤ ν₁(S), ν₂(S) ≤ 1/√m_q` (0 when satisfied).
    pub mass_bound_violation: f64,
    /// Violation of `m_q/√M_q ≤ exp(uᵢ) ≤ M_q/√m_q`, measured on `log exp(uᵢ)` (0 when satisfied).
    pub potential_bound_violation: f64,
    /// `|ν₁(S) - ν₂(S)|`.
    pub gauge_gap: f64,
    pub bounds: KernelBounds,
}

impl SolutionReport {
    pub fn max_residual(&self) -> f64 {
        self.residuals[0].max(self.residuals[1])
    }
}

fn check_problem(q: &KernelMatrix, mu1: &DiscreteMeasure, mu2: &DiscreteMeasure) -> Result<()> {
    if q.rows() != mu1.len() || q.cols() != mu2.len() {
        return Err(Error::invalid(format!(
            "kernel is {}x{} but marginals have {} and {} points",
            q.rows(),
            q.cols(),
            mu1.len(),
            mu2.len()
        )));
    }
    for (k, mu) in [mu1, mu2].into_iter().enumerate() {
        if !mu.is_probability() {
            return Err(Error::invalid(format!(
                "marginal {} has mass {} (expected 1)",
                k + 1,
                mu.total_mass()
            )));
        }
    }
    Ok(())
}

/// Reduced problem on the positive-weight points.
struct Reduced {
    idx1: Vec<usize>,
    idx2: Vec<usize>,
    /// `log q` row-major (n1 x n2) and its transpose.
    lq: Vec<f64>,
    lqt: Vec<f64>,
    lw1: Vec<f64>,
    lw2: Vec<f64>,
}

impl Reduced {
    fn new(q: &KernelMatrix, mu1: &DiscreteMeasure, mu2: &DiscreteMeasure) -> Self {
        let idx1 = mu1.support();
        let idx2 = mu2.support();
        let (n1, n2) = (idx1.len(), idx2.len());
        let mut lq = Vec::with_capacity(n1 * n2);
        for &i in &idx1 {
            for &j in &idx2 {
                lq.push(q.log_at(i, j));
            }
        }
        let mut lqt = vec![0.0; n1 * n2];
        for a in 0..n1 {
            for b in 0..n2 {
                lqt[b * n1 + a] = lq[a * n2 + b];
            }
        }
        let lw1 = idx1.iter().map(|&i| mu1.weights()[i].ln()).collect();
        let lw2 = idx2.iter().map(|&j| mu2.weights()[j].ln()).collect();
        Self { idx1, idx2, lq, lqt, lw1, lw2 }
    }

    fn n1(&self) -> usize {
        self.idx1.len()
    }

    fn n2(&self) -> usize {
        self.idx2.len()
    }

    /// `T₁(u₂)_x = log Σ_y q(x,y) e^{-u₂(y)} μ₂(y)`.
    fn t1(&self, u2: &[f64], out: &mut [f64]) {
        let n2 = self.n2();
        let shifted: Vec<f64> = self.lw2.iter().zip(u2).map(|(w, u)| w - u).collect();
        for (a, o) in out.iter_mut().enumerate() {
            let row = &self.lq[a * n2..(a + 1) * n2];
            *o = log_sum_exp_by(n2, |b| row[b] + shifted[b]);
        }
    }

    fn t2(&self, u1: &[f64], out: &mut [f64]) {
        let n1 = self.n1();
        let shifted: Vec<f64> = self.lw1.iter().zip(u1).map(|(w, u)| w - u).collect();
        for (b, o) in out.iter_mut().enumerate() {
            let col = &self.lqt[b * n1..(b + 1) * n1];
            *o = log_sum_exp_by(n1, |a| col[a] + shifted[a]);
        }
    }

    /// Residual of the first marginal equation when the second holds exactly.
    fn residual1(&self, u1: &[f64], t1: &[f64]) -> f64 {
        let terms: Vec<f64> = (0..self.n1())
            .map(|a| self.lw1[a].exp() * (t1[a] - u1[a]).exp_m1().abs())
            .collect();
        pairwise_sum(&terms)
    }
}

/// Linear-domain variant of the same sweep.
struct LinearSweep {
    q: Vec<f64>,
    qt: Vec<f64>,
    w1: Vec<f64>,
    w2: Vec<f64>,
}

impl LinearSweep {
    fn new(r: &Reduced) -> Self {
        Self {
            q: r.lq.iter().map(|v| v.exp()).collect(),
            qt: r.lqt.iter().map(|v| v.exp()).collect(),
            w1: r.lw1.iter().map(|v| v.exp()).collect(),
            w2: r.lw2.iter().map(|v| v.exp()).collect(),
        }
    }

    fn apply(mat: &[f64], w: &[f64], u: &[f64], out: &mut [f64]) {
        let n = w.len();
        let v: Vec<f64> = w.iter().zip(u).map(|(w, u)| w * (-u).exp()).collect();
        for (a, o) in out.iter_mut().enumerate() {
            let row = &mat[a * n..(a + 1) * n];
            let s: f64 = row.iter().zip(&v).map(|(q, v)| q * v).sum();
            *o = s.ln();
        }
    }
}

/// Solve with the default initialisation `u₂ ≡ 0`.
pub fn solve(
    q: &KernelMatrix,
    mu1: &DiscreteMeasure,
    mu2: &DiscreteMeasure,
    cfg: &SolverConfig,
) -> Result<SchrodingerSolution> {
    solve_from(q, mu1, mu2, cfg, None)
}

/// Solve starting from a given `u₂` (one value per point of `mu2`).
pub fn solve_from(
    q: &KernelMatrix,
    mu1: &DiscreteMeasure,
    mu2: &DiscreteMeasure,
    cfg: &SolverConfig,
    u2_init: Option<&[f64]>,
) -> Result<SchrodingerSolution> {
    cfg.validate()?;
    check_problem(q, mu1, mu2)?;
    let red = Reduced::new(q, mu1, mu2);
    let (n1, n2) = (red.n1(), red.n2());
    let mut u2: Vec<f64> = match u2_init {
        Some(init) => {
            if init.len() != mu2.len() {
                return Err(Error::invalid("initial u2 has the wrong length"));
            }
            red.idx2.iter().map(|&j| init[j]).collect()
        }
        None => vec![0.0; n2],
    };
    let lin = (!cfg.log_domain).then(|| LinearSweep::new(&red));
    let sweep1 = |u2: &[f64], out: &mut [f64]| match &lin {
        Some(l) => LinearSweep::apply(&l.q, &l.w2, u2, out),
        None => red.t1(u2, out),
    };
    let sweep2 = |u1: &[f64], out: &mut [f64]| match &lin {
        Some(l) => LinearSweep::apply(&l.qt, &l.w1, u1, out),
        None => red.t2(u1, out),
    };

    let mut u1 = vec![0.0; n1];
    let mut next = vec![0.0; n1];
    sweep1(&u2, &mut u1);
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        iterations += 1;
        sweep2(&u1, &mut u2);
        sweep1(&u2, &mut next);
        residual = red.residual1(&u1, &next);
        if !residual.is_finite() {
            return Err(Error::NotConverged { iterations, residual });
        }
        if residual <= cfg.tol {
            break;
        }
        std::mem::swap(&mut u1, &mut next);
    }
    if !(residual <= cfg.tol) {
        return Err(Error::NotConverged { iterations, residual });
    }
    // Keep sweeping while the residual still drops: on badly conditioned kernels the
    // factors carry large mass and a residual of `tol` leaves visible error in `ν`.
    std::mem::swap(&mut u1, &mut next);
    while iterations < cfg.max_iter && residual > 0.0 {
        let (prev_u2, prev) = (u2.clone(), residual);
        sweep2(&u1, &mut u2);
        sweep1(&u2, &mut next);
        let r = red.residual1(&u1, &next);
        if !(r < prev) {
            u2 = prev_u2;
            break;
        }
        iterations += 1;
        residual = r;
        std::mem::swap(&mut u1, &mut next);
    }
    finish(q, mu1, mu2, &red, &u1, &u2, iterations)
}

/// Turn reduced potentials into a normalised solution on the full grids.
fn finish(
    q: &KernelMatrix,
    mu1: &DiscreteMeasure,
    mu2: &DiscreteMeasure,
    red: &Reduced,
    u1: &[f64],
    u2: &[f64],
    iterations: usize,
) -> Result<SchrodingerSolution> {
    let mut w1 = vec![0.0; mu1.len()];
    for (a, &i) in red.idx1.iter().enumerate() {
        w1[i] = (red.lw1[a] - u1[a]).exp();
    }
    let mut w2 = vec![0.0; mu2.len()];
    for (b, &j) in red.idx2.iter().enumerate() {
        w2[j] = (red.lw2[b] - u2[b]).exp();
    }
    let (nu1, nu2) = normalize_pair(&mu1.with_weights(w1)?, &mu2.with_weights(w2)?)?;
    let (pu1, pu2) = potentials(q, &nu1, &nu2)?;
    let mut sol = SchrodingerSolution {
        normalization_mass: 0.5 * (nu1.total_mass() + nu2.total_mass()),
        nu1,
        nu2,
        u1: pu1,
        u2: pu2,
        iterations,
        marginal_residual: 0.0,
        residuals: [0.0; 2],
    };
    let rep = verify_solution(q, mu1, mu2, &sol)?;
    sol.residuals = rep.residuals;
    sol.marginal_residual = rep.max_residual();
    Ok(sol)
}

/// Fix the gauge: `(C ν₁, C⁻¹ ν₂)` with `C = √(ν₂(S)/ν₁(S))`.
pub fn normalize_pair(
    nu1: &DiscreteMeasure,
    nu2: &DiscreteMeasure,
) -> Result<(DiscreteMeasure, DiscreteMeasure)> {
    let (m1, m2) = (nu1.total_mass(), nu2.total_mass());
    if !(m1 > 0.0 && m2 > 0.0) {
        return Err(Error::invalid("cannot normalise a factor of zero mass"));
    }
    if m1 == m2 {
        return Ok((nu1.clone(), nu2.clone()));
    }
    let c = (m2 / m1).sqrt();
    Ok((nu1.scaled(c), nu2.scaled(1.0 / c)))
}

/// `u₁(x) = log Σ_y q(x,y) ν₂(y)`, `u₂(y) = log Σ_x q(x,y) ν₁(x)`.
pub fn potentials(
    q: &KernelMatrix,
    nu1: &DiscreteMeasure,
    nu2: &DiscreteMeasure,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if q.rows() != nu1.len() || q.cols() != nu2.len() {
        return Err(Error::invalid("kernel shape does not match the factor measures"));
    }
    if !(nu1.total_mass() > 0.0 && nu2.total_mass() > 0.0) {
        return Err(Error::invalid("factor measures must have positive mass"));
    }
    let s1 = nu1.support();
    let s2 = nu2.support();
    let l1: Vec<f64> = s1.iter().map(|&i| nu1.weights()[i].ln()).collect();
    let l2: Vec<f64> = s2.iter().map(|&j| nu2.weights()[j].ln()).collect();
    let u1 = (0..q.rows())
        .map(|i| log_sum_exp_by(s2.len(), |b| q.log_at(i, s2[b]) + l2[b]))
        .collect();
    let u2 = (0..q.cols())
        .map(|j| log_sum_exp_by(s1.len(), |a| q.log_at(s1[a], j) + l1[a]))
        .collect();
    Ok((u1, u2))
}

/// Residuals, a-priori bounds and gauge diagnostics of `sol` for the given problem.
/// The potentials are recomputed from `ν₁, ν₂`; the stored `u` fields enter only the
/// potential-bound check.
pub fn verify_solution(
    q: &KernelMatrix,
    mu1: &DiscreteMeasure,
    mu2: &DiscreteMeasure,
    sol: &SchrodingerSolution,
) -> Result<SolutionReport> {
    let (u1, u2) = potentials(q, &sol.nu1, &sol.nu2)?;
    let recon = |nu: &DiscreteMeasure, u: &[f64]| -> Result<DiscreteMeasure> {
        nu.with_weights(
            nu.weights()
                .iter()
                .zip(u)
                .map(|(w, u)| if *w == 0.0 { 0.0 } else { w * u.exp() })
                .collect(),
        )
    };
    let r1 = tv_norm(&recon(&sol.nu1, &u1)?, mu1)?;
    let r2 = tv_norm(&recon(&sol.nu2, &u2)?, mu2)?;

    let bounds = q.bounds();
    let (lm, lbm) = (bounds.log_m_q, bounds.log_big_m_q);
    let mut mass_violation = 0.0f64;
    for m in [sol.nu1.total_mass(), sol.nu2.total_mass()] {
        let lmass = m.ln();
        mass_violation = mass_violation.max(-0.5 * lbm - lmass).max(lmass + 0.5 * lm);
    }
    let (lo, hi) = (lm - 0.5 * lbm, lbm - 0.5 * lm);
    let mut pot_violation = 0.0f64;
    for &u in sol.u1.iter().chain(&sol.u2) {
        pot_violation = pot_violation.max(lo - u).max(u - hi);
    }
    // Bounds attained with equality (constant kernels) may miss by a few ulps.
    let slack = |v: f64, scale: f64| (v - 16.0 * f64::EPSILON * scale.max(1.0)).max(0.0);
    Ok(SolutionReport {
        residuals: [r1, r2],
        mass_bound_violation: slack(mass_violation, lbm.abs().max(lm.abs())),
        potential_bound_violation: slack(pot_violation, hi.abs().max(lo.abs())),
        gauge_gap: (sol.nu1.total_mass() - sol.nu2.total_mass()).abs(),
        bounds,
    })
}

/// Independent reference solver: damped Newton on `F(u₁, u₂) = (u₁ - T₁(u₂), u₂ - T₂(u₁))`
/// with the gauge row `Σ u₁ = 0`, each step solved in the least-squares sense.
/// Intended for grids of at most 16 points.
pub fn brute_force_solve(
    q: &KernelMatrix,
    mu1: &DiscreteMeasure,
    mu2: &DiscreteMeasure,
) -> Result<SchrodingerSolution> {
    check_problem(q, mu1, mu2)?;
    if mu1.len() > 16 || mu2.len() > 16 {
        return Err(Error::invalid("brute_force_solve is limited to grids of 16 points"));
    }
    let red = Reduced::new(q, mu1, mu2);
    let (n1, n2) = (red.n1(), red.n2());
    let n = n1 + n2;
    let mut x = vec![0.0; n];

    let residual = |x: &[f64]| -> Vec<f64> {
        let (u1, u2) = x.split_at(n1);
        let mut t1 = vec![0.0; n1];
        let mut t2 = vec![0.0; n2];
        red.t1(u2, &mut t1);
        red.t2(u1, &mut t2);
        let mut f: Vec<f64> = (0..n1).map(|a| u1[a] - t1[a]).collect();
        f.extend((0..n2).map(|b| u2[b] - t2[b]));
        f.push(u1.iter().sum::<f64>());
        f
    };
    let norm = |f: &[f64]| f.iter().map(|v| v * v).sum::<f64>().sqrt();

    let mut f = residual(&x);
    let mut iterations = 0;
    while norm(&f) > 1e-14 {
        iterations += 1;
        if iterations > 200 {
            return Err(Error::NewtonDiverged(format!("residual {:e} after 200 steps", norm(&f))));
        }
        let (u1, u2) = x.split_at(n1);
        // Jacobian: dT₁/du₂ = -π₁ (row-softmax), dT₂/du₁ = -π₂.
        let mut jac = DMatrix::<f64>::zeros(n + 1, n);
        let mut t1 = vec![0.0; n1];
        let mut t2 = vec![0.0; n2];
        red.t1(u2, &mut t1);
        red.t2(u1, &mut t2);
        for a in 0..n1 {
            jac[(a, a)] = 1.0;
            for b in 0..n2 {
                let pi = (red.lq[a * n2 + b] + red.lw2[b] - u2[b] - t1[a]).exp();
                jac[(a, n1 + b)] = pi;
            }
        }
        for b in 0..n2 {
            jac[(n1 + b, n1 + b)] = 1.0;
            for a in 0..n1 {
                let pi = (red.lq[a * n2 + b] + red.lw1[a] - u1[a] - t2[b]).exp();
                jac[(n1 + b, a)] = pi;
            }
        }
        for a in 0..n1 {
            jac[(n, a)] = 1.0;
        }
        let rhs = -DVector::from_vec(f.clone());
        let step = jac
            .svd(true, true)
            .solve(&rhs, 1e-13)
            .map_err(|e| Error::NewtonDiverged(e.to_string()))?;
        let f0 = norm(&f);
        let mut lambda = 1.0;
        let mut accepted = false;
        while lambda >= 1e-10 {
            let trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, d)| a + lambda * d).collect();
            let ft = residual(&trial);
            if norm(&ft) < f0 {
                x = trial;
                f = ft;
                accepted = true;
                break;
            }
            lambda *= 0.5;
        }
        if !accepted {
            if f0 > 1e-12 {
                return Err(Error::NewtonDiverged(format!("line search stalled at {f0:e}")));
            }
            // within rounding of the root
            break;
        }
    }
    let (u1, u2) = x.split_at(n1);
    finish(q, mu1, mu2, &red, u1, u2, iterations)
}
