//! The h-path (Schrödinger bridge) process built on a reference transition density.
//!
//! With `(ν₁, ν₂)` solving the Schrödinger system for `q = p(0,·;1,·)` and marginals `(P₀, P₁)`,
//! `h(t,x) = ∫ p(t,x;1,y) ν₂(dy)` is space-time harmonic for the reference generator, the
//! bridge has drift `a ∇log h + b`, and its time-`t` marginal has density `ϕ(t,x) h(t,x)` with
//! `ϕ(t,x) = ∫ ν₁(dz) p(0,z;t,x)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::kernel::{AffineGaussian, TransitionKernel};
use crate::measure::{bounded_lipschitz_distance, tv_norm, DiscreteMeasure};
use crate::numerics::{log_sum_exp_by, SpdMatrix};

use crate::solver::{solve, SchrodingerSolution, SolverConfig};

/// Everything needed to rebuild a [`BridgeModel`] without re-solving.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BridgeSpec {
    pub transition: TransitionKernel,
    pub grid: Grid,
    pub p0: DiscreteMeasure,
    pub p1: DiscreteMeasure,
    pub time_steps: usize,
    pub solver: SolverConfig,
    pub solution: SchrodingerSolution,
}

/// Factor `ν₂` restricted to its support, in log form.
#[derive(Clone, Debug)]
struct Factor {
    dim: usize,
    coords: Vec<f64>,
    log_w: Vec<f64>,
}

impl Factor {
    fn new(nu: &DiscreteMeasure) -> Self {
        let s = nu.support();
        let dim = nu.dim();
        let mut coords = Vec::with_capacity(s.len() * dim);
        for &j in &s {
            coords.extend_from_slice(nu.point(j));
        }
        let log_w = s.iter().map(|&j| nu.weights()[j].ln()).collect();
        Self { dim, coords, log_w }
    }

    fn len(&self) -> usize {
        self.log_w.len()
    }

    #[inline]
    fn point(&self, j: usize) -> &[f64] {
        &self.coords[j * self.dim..(j + 1) * self.dim]
    }

    /// `log ∫ p(x, y) ν(dy)` and `∇_x` of it.
    fn log_h_grad(&self, g: &AffineGaussian, x: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let n = self.len();
        let d = self.dim;
        if d == 1 {
            let inv = g.cov.inv[0];
            let shift = g.alpha * x[0] + g.offset[0];
            let mut max = f64::NEG_INFINITY;
            for j in 0..n {
                let r = self.coords[j] - shift;
                let v = self.log_w[j] - 0.5 * inv * r * r;
                if v > max {
                    max = v;
                }
            }
            let mut s = 0.0;
            let mut s1 = 0.0;
            for j in 0..n {
                let r = self.coords[j] - shift;
                let e = (self.log_w[j] - 0.5 * inv * r * r - max).exp();
                s += e;
                s1 += e * r;
            }
            if let Some(gr) = grad {
                gr[0] = g.alpha * inv * s1 / s;
            }
            return g.norm() + max + s.ln();
        }
        let lse = log_sum_exp_by(n, |j| self.log_w[j] + g.log_density(x, self.point(j)));
        if let Some(gr) = grad {
            let mut mean_r = vec![0.0; d];
            for j in 0..n {
                let w = (self.log_w[j] + g.log_density(x, self.point(j)) - lse).exp();
                for k in 0..d {
                    mean_r[k] += w * (self.point(j)[k] - g.alpha * x[k] - g.offset[k]);
                }
            }
            g.cov.inv_apply(&mean_r, gr);
            for v in gr.iter_mut() {
                *v *= g.alpha;
            }
        }
        lse
    }
}

/// `log h(t, x)` for a given terminal factor `ν₂` (`t < 1`).
pub fn log_h_from(transition: &TransitionKernel, nu2: &DiscreteMeasure, t: f64, x: &[f64]) -> Result<f64> {
    let g = transition.affine(x.len(), t, 1.0)?;
    Ok(Factor::new(nu2).log_h_grad(&g, x, None))
}

/// `∇_x log h(t, x)` for a given terminal factor `ν₂` (`t < 1`).
pub fn grad_log_h_from(
    transition: &TransitionKernel,
    nu2: &DiscreteMeasure,
    t: f64,
    x: &[f64],
) -> Result<Vec<f64>> {
    let g = transition.affine(x.len(), t, 1.0)?;
    let mut out = vec![0.0; x.len()];
    Factor::new(nu2).log_h_grad(&g, x, Some(&mut out));
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct BridgeModel {
    spec: BridgeSpec,
    factor2: Factor,
    /// `t_k = k / K`, `k = 0..K`.
    times: Vec<f64>,
    /// `log h(t_k, x_i)`, row per time.
    log_h: Vec<f64>,
    /// `∇ log h(t_k, x_i)`, `d` components per point.
    grad_log_h: Vec<f64>,
    diffusion: Vec<Vec<f64>>,
    a_mat: SpdMatrix,
}

/// Solve the Schrödinger system for `q = p(0,·;1,·)` and marginals `(P₀, P₁)` on `grid`, then
/// tabulate `h` on the time grid `k / time_steps`.
pub fn build_bridge(
    transition: TransitionKernel,
    p0: DiscreteMeasure,
    p1: DiscreteMeasure,
    grid: Grid,
    time_steps: usize,
    cfg: &SolverConfig,
) -> Result<BridgeModel> {
    if p1.is_atomic() {
        return Err(Error::TerminalNotDensity);
    }
    check_on_grid(&p0, &grid, "P0")?;
    check_on_grid(&p1, &grid, "P1")?;
    transition.validate(grid.dim())?;
    let q = transition.kernel(0.0, 1.0)?.as_matrix_on(&grid, &grid)?;
    let solution = solve(&q, &p0, &p1, cfg)?;
    BridgeModel::from_spec(BridgeSpec {
        transition,
        grid,
        p0,
        p1,
        time_steps,
        solver: cfg.clone(),
        solution,
    })
}

fn check_on_grid(m: &DiscreteMeasure, grid: &Grid, name: &str) -> Result<()> {
    if m.len() != grid.len() || m.dim() != grid.dim() {
        return Err(Error::invalid(format!("{name} must be given on every grid point")));
    }
    let gv = grid.cell_volume();
    if (m.cell_volume() - gv).abs() > 1e-12 * gv {
        return Err(Error::IncompatibleQuadrature(m.cell_volume(), gv));
    }
    if !m.is_probability() {
        return Err(Error::invalid(format!("{name} must be a probability measure")));
    }
    Ok(())
}

impl BridgeModel {
    pub fn from_spec(spec: BridgeSpec) -> Result<Self> {
        if spec.time_steps < 2 {
            return Err(Error::invalid("the time grid needs at least 2 steps"));
        }
        let d = spec.grid.dim();
        spec.transition.validate(d)?;
        if spec.solution.nu2.len() != spec.grid.len() || spec.solution.nu1.len() != spec.grid.len() {
            return Err(Error::invalid("solution does not live on the model grid"));
        }
        let diffusion = spec.transition.diffusion(d)?;
        let a_mat = SpdMatrix::new(&diffusion)
            .ok_or_else(|| Error::invalid("diffusion matrix must be positive definite"))?;
        let factor2 = Factor::new(&spec.solution.nu2);
        let k = spec.time_steps;
        let times: Vec<f64> = (0..k).map(|i| i as f64 / k as f64).collect();
        let n = spec.grid.len();
        let points = spec.grid.points();
        let rows: Vec<Result<(Vec<f64>, Vec<f64>)>> = times
            .par_iter()
            .map(|&t| {
                let g = spec.transition.affine(d, t, 1.0)?;
                let mut lh = Vec::with_capacity(n);
                let mut gr = vec![0.0; n * d];
                for (i, x) in points.iter().enumerate() {
                    lh.push(factor2.log_h_grad(&g, x, Some(&mut gr[i * d..(i + 1) * d])));
                }
                Ok((lh, gr))
            })
            .collect();
        let mut log_h = Vec::with_capacity(k * n);
        let mut grad_log_h = Vec::with_capacity(k * n * d);
        for r in rows {
            let (lh, gr) = r?;
            log_h.extend(lh);
            grad_log_h.extend(gr);
        }
        Ok(Self { spec, factor2, times, log_h, grad_log_h, diffusion, a_mat })
    }

    pub fn spec(&self) -> &BridgeSpec {
        &self.spec
    }

    pub fn transition(&self) -> &TransitionKernel {
        &self.spec.transition
    }

    pub fn grid(&self) -> &Grid {
        &self.spec.grid
    }

    pub fn p0(&self) -> &DiscreteMeasure {
        &self.spec.p0
    }

    pub fn p1(&self) -> &DiscreteMeasure {
        &self.spec.p1
    }

    pub fn solution(&self) -> &SchrodingerSolution {
        &self.spec.solution
    }

    pub fn nu1(&self) -> &DiscreteMeasure {
        &self.spec.solution.nu1
    }

    pub fn nu2(&self) -> &DiscreteMeasure {
        &self.spec.solution.nu2
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.spec.time_steps as f64
    }

    /// `log h(t_k, ·)` on the grid.
    pub fn log_h_row(&self, k: usize) -> &[f64] {
        let n = self.spec.grid.len();
        &self.log_h[k * n..(k + 1) * n]
    }

    /// `∇ log h(t_k, ·)` on the grid, `d` interleaved components.
    pub fn grad_log_h_row(&self, k: usize) -> &[f64] {
        let n = self.spec.grid.len() * self.spec.grid.dim();
        &self.grad_log_h[k * n..(k + 1) * n]
    }

    /// `log h(1, x_i) = log(ν₂-weight / cell volume)`.
    pub fn log_h_terminal(&self) -> Vec<f64> {
        let nu2 = self.nu2();
        (0..nu2.len()).map(|i| nu2.density(i).ln()).collect()
    }

    pub fn diffusion(&self) -> &[Vec<f64>] {
        &self.diffusion
    }

    /// `log h(t, x)` by direct quadrature against `ν₂`, for `t < 1`.
    pub fn log_h_at(&self, t: f64, x: &[f64]) -> Result<f64> {
        let g = self.spec.transition.affine(x.len(), t, 1.0)?;
        Ok(self.factor2.log_h_grad(&g, x, None))
    }

    /// `∇_x log h(t, x)`, analytic through the Gaussian transition, for `t < 1`.
    pub fn grad_log_h_at(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let g = self.spec.transition.affine(x.len(), t, 1.0)?;
        let mut out = vec![0.0; x.len()];
        self.factor2.log_h_grad(&g, x, Some(&mut out));
        Ok(out)
    }

    /// `∇_x log h(t, x)` by central differences of step `delta` on the quadrature `log h`.
    pub fn grad_log_h_fd(&self, t: f64, x: &[f64], delta: f64) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(x.len());
        let mut xp = x.to_vec();
        for k in 0..x.len() {
            xp[k] = x[k] + delta;
            let up = self.log_h_at(t, &xp)?;
            xp[k] = x[k] - delta;
            let dn = self.log_h_at(t, &xp)?;
            xp[k] = x[k];
            out.push((up - dn) / (2.0 * delta));
        }
        Ok(out)
    }

    /// Bridge drift `a(t,x) ∇log h(t,x) + b(t,x)` for `t < 1`.
    pub fn drift(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        if t >= 1.0 {
            return Err(Error::DriftSingular(t));
        }
        let g = self.grad_log_h_at(t, x)?;
        self.drift_from_grad(t, x, &g)
    }

    /// Control part `a ∇log h` plus the reference drift at `(t, x)` given `∇log h`.
    pub(crate) fn drift_from_grad(&self, t: f64, x: &[f64], grad: &[f64]) -> Result<Vec<f64>> {
        let b = self.spec.transition.drift(t, x)?;
        Ok((0..x.len())
            .map(|k| b[k] + (0..x.len()).map(|j| self.diffusion[k][j] * grad[j]).sum::<f64>())
            .collect())
    }

    /// `γᵀ a⁻¹ γ` for a control `γ`.
    pub fn control_norm2(&self, gamma: &[f64]) -> f64 {
        self.a_mat.inv_quad(gamma)
    }

    pub(crate) fn diffusion_matrix(&self) -> &SpdMatrix {
        &self.a_mat
    }

    /// Relative entropy of the bridge path law with respect to the reference process started
    /// from `P₀`: `∫ log h(1,·) dP₁ - ∫ log h(0,·) dP₀`.
    pub fn relative_entropy(&self) -> f64 {
        let terminal = self.log_h_terminal();
        let mut v = 0.0;
        for (i, &w) in self.p1().weights().iter().enumerate() {
            if w > 0.0 {
                v += w * terminal[i];
            }
        }
        for (i, &w) in self.p0().weights().iter().enumerate() {
            if w > 0.0 {
                v -= w * self.log_h_row(0)[i];
            }
        }
        v
    }

    /// Time-`t` marginal of the bridge. At `t = 0` this is `exp(u₁) ν₁`, at `t = 1` it is
    /// `exp(u₂) ν₂`, and in between it has density `ϕ(t,x) h(t,x)`.
    pub fn marginal_flow(&self, t: f64) -> Result<DiscreteMeasure> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid(format!("time {t} outside [0, 1]")));
        }
        let sol = self.solution();
        if t == 0.0 || t == 1.0 {
            let (nu, u) = if t == 0.0 { (&sol.nu1, &sol.u1) } else { (&sol.nu2, &sol.u2) };
            let w = nu
                .weights()
                .iter()
                .zip(u)
                .map(|(w, u)| if *w == 0.0 { 0.0 } else { w * u.exp() })
                .collect();
            return nu.with_weights(w);
        }
        let d = self.spec.grid.dim();
        let g0 = self.spec.transition.affine(d, 0.0, t)?;
        let gt = self.spec.transition.affine(d, t, 1.0)?;
        let factor1 = Factor::new(&sol.nu1);
        let ln_vol = self.spec.grid.cell_volume().ln();
        let points = self.spec.grid.points();
        let w: Vec<f64> = points
            .par_iter()
            .map(|x| {
                let log_phi = log_sum_exp_by(factor1.len(), |j| factor1.log_w[j] + g0.log_density(factor1.point(j), x));
                let log_h = self.factor2.log_h_grad(&gt, x, None);
                (log_phi + log_h + ln_vol).exp()
            })
            .collect();
        sol.nu1.with_weights(w)
    }

    /// Re-solve the Schrödinger system with kernel `p(t,·;1,·)` and marginals `(P_t, P₁)`,
    /// where `P_t` is the normalised bridge marginal, and compare with the model.
    pub fn recompute_u_from_marginal(&self, t: f64) -> Result<RecomputeReport> {
        let pt = self.marginal_flow(t)?.normalized()?;
        self.recompute_u_with_marginal(t, &pt)
    }

    /// As [`recompute_u_from_marginal`](Self::recompute_u_from_marginal) with a caller-supplied
    /// time-`t` marginal.
    pub fn recompute_u_with_marginal(&self, t: f64, pt: &DiscreteMeasure) -> Result<RecomputeReport> {
        if !(0.0..1.0).contains(&t) {
            return Err(Error::invalid(format!("re-solve time {t} outside [0, 1)")));
        }
        let q = self.spec.transition.kernel(t, 1.0)?.as_matrix_on(&self.spec.grid, &self.spec.grid)?;
        let sol = solve(&q, pt, self.p1(), &self.spec.solver)?;
        let log_h: Vec<f64> = if let Some(k) = self.time_index(t) {
            self.log_h_row(k).to_vec()
        } else {
            let gt = self.spec.transition.affine(self.spec.grid.dim(), t, 1.0)?;
            self.spec
                .grid
                .points()
                .iter()
                .map(|x| self.factor2.log_h_grad(&gt, x, None))
                .collect()
        };
        let max_deviation = sol
            .u1
            .iter()
            .zip(&log_h)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let nu2_tv = tv_norm(&sol.nu2, self.nu2())?;
        Ok(RecomputeReport {
            t,
            max_deviation,
            nu2_tv,
            iterations: sol.iterations,
            u1: sol.u1.clone(),
            solution: sol,
        })
    }

    fn time_index(&self, t: f64) -> Option<usize> {
        let k = (t * self.spec.time_steps as f64).round();
        (k >= 0.0 && (k as usize) < self.times.len() && k / self.spec.time_steps as f64 == t).then_some(k as usize)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RecomputeReport {
    pub t: f64,
    /// Re-solved potential `u₁ᵗ` on the grid.
    pub u1: Vec<f64>,
    /// `sup |u₁ᵗ - log h(t,·)|`.
    pub max_deviation: f64,
    /// `||ν₂ᵗ - ν₂||` after gauge normalisation.
    pub nu2_tv: f64,
    pub iterations: usize,
    #[serde(skip)]
    pub solution: SchrodingerSolution,
}

/// Pointwise residual values on a `(time, space)` grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResidualGrid {
    pub times: Vec<f64>,
    pub xs: Vec<f64>,
    /// Row per time.
    pub values: Vec<f64>,
    /// Spatial indices (into `xs`) counted as interior.
    pub interior: Vec<usize>,
    pub interior_max: f64,
    /// `(Σ r² Δx Δt)^{1/2}` over the interior.
    pub interior_l2: f64,
}

impl ResidualGrid {
    fn new(times: Vec<f64>, xs: Vec<f64>, values: Vec<f64>, band: f64, dt: f64) -> Self {
        let (lo, hi) = (xs[0], xs[xs.len() - 1]);
        let interior: Vec<usize> = (0..xs.len())
            .filter(|&i| xs[i] - lo >= band - 1e-12 && hi - xs[i] >= band - 1e-12)
            .collect();
        let dx = if xs.len() > 1 { xs[1] - xs[0] } else { 1.0 };
        let n = xs.len();
        let mut max = 0.0f64;
        let mut l2 = 0.0;
        for k in 0..times.len() {
            for &i in &interior {
                let v = values[k * n + i];
                max = max.max(v.abs());
                l2 += v * v * dx * dt;
            }
        }
        Self { times, xs, values, interior, interior_max: max, interior_l2: l2.sqrt() }
    }

    pub fn at(&self, k: usize, i: usize) -> f64 {
        self.values[k * self.xs.len() + i]
    }
}

/// Coefficients of a one-dimensional reference generator.
struct Generator1d<'a> {
    a: f64,
    transition: &'a TransitionKernel,
}

impl Generator1d<'_> {
    fn b(&self, t: f64, x: f64) -> f64 {
        self.transition.drift(t, &[x]).map(|v| v[0]).unwrap_or(0.0)
    }
}

fn require_1d(grid: &Grid, min_points: usize, times: usize, min_times: usize) -> Result<()> {
    if grid.dim() != 1 {
        return Err(Error::invalid("PDE residuals are implemented for one space dimension"));
    }
    if grid.len() < min_points || times < min_times {
        return Err(Error::GridTooCoarse(format!(
            "need at least {min_points} space points and {min_times} time levels (got {} and {times})",
            grid.len()
        )));
    }
    Ok(())
}

/// Central-difference residual of `∂_t h + ½ a ∂²_x h + b ∂_x h` for a table `h` (row per
/// time, uniform spacing `dt`), at interior time levels and spatial points `1..n-1`.
pub fn backward_residual_table(
    h: &[f64],
    times: &[f64],
    grid: &Grid,
    a: f64,
    b: impl Fn(f64, f64) -> f64,
    band: f64,
) -> Result<ResidualGrid> {
    require_1d(grid, 3, times.len(), 3)?;
    let n = grid.len();
    let dt = times[1] - times[0];
    let dx = grid.spacing(0);
    let xs = grid.axis_coords(0);
    let mut vals = Vec::with_capacity((times.len() - 2) * (n - 2));
    for k in 1..times.len() - 1 {
        let t = times[k];
        for i in 1..n - 1 {
            let c = h[k * n + i];
            let ht = (h[(k + 1) * n + i] - h[(k - 1) * n + i]) / (2.0 * dt);
            let hxx = (h[k * n + i + 1] - 2.0 * c + h[k * n + i - 1]) / (dx * dx);
            let hx = (h[k * n + i + 1] - h[k * n + i - 1]) / (2.0 * dx);
            vals.push(ht + 0.5 * a * hxx + b(t, xs[i]) * hx);
        }
    }
    Ok(ResidualGrid::new(
        times[1..times.len() - 1].to_vec(),
        xs[1..n - 1].to_vec(),
        vals,
        band,
        dt,
    ))
}

/// Central-difference residual of `∂_t u + ½ a ∂²_x u + b ∂_x u + ½ a (∂_x u)²`.
pub fn hjb_residual_table(
    u: &[f64],
    times: &[f64],
    grid: &Grid,
    a: f64,
    b: impl Fn(f64, f64) -> f64,
    band: f64,
) -> Result<ResidualGrid> {
    require_1d(grid, 3, times.len(), 3)?;
    let n = grid.len();
    let dt = times[1] - times[0];
    let dx = grid.spacing(0);
    let xs = grid.axis_coords(0);
    let mut vals = Vec::with_capacity((times.len() - 2) * (n - 2));
    for k in 1..times.len() - 1 {
        let t = times[k];
        for i in 1..n - 1 {
            let c = u[k * n + i];
            let ut = (u[(k + 1) * n + i] - u[(k - 1) * n + i]) / (2.0 * dt);
            let uxx = (u[k * n + i + 1] - 2.0 * c + u[k * n + i - 1]) / (dx * dx);
            let ux = (u[k * n + i + 1] - u[k * n + i - 1]) / (2.0 * dx);
            vals.push(ut + 0.5 * a * uxx + b(t, xs[i]) * ux + 0.5 * a * ux * ux);
        }
    }
    Ok(ResidualGrid::new(
        times[1..times.len() - 1].to_vec(),
        xs[1..n - 1].to_vec(),
        vals,
        band,
        dt,
    ))
}

/// The HJB residual in chain-rule form: the stencil of `∂_t h + ½ a ∂²h + b ∂h` divided by `h`,
/// written in terms of `u = log h` differences, so that it coincides with the backward residual
/// over `h` on the same stencil.
pub fn hjb_chain_rule_table(
    u: &[f64],
    times: &[f64],
    grid: &Grid,
    a: f64,
    b: impl Fn(f64, f64) -> f64,
    band: f64,
) -> Result<ResidualGrid> {
    require_1d(grid, 3, times.len(), 3)?;
    let n = grid.len();
    let dt = times[1] - times[0];
    let dx = grid.spacing(0);
    let xs = grid.axis_coords(0);
    let mut vals = Vec::with_capacity((times.len() - 2) * (n - 2));
    for k in 1..times.len() - 1 {
        let t = times[k];
        for i in 1..n - 1 {
            let c = u[k * n + i];
            let ep_t = (u[(k + 1) * n + i] - c).exp_m1();
            let em_t = (u[(k - 1) * n + i] - c).exp_m1();
            let ep = (u[k * n + i + 1] - c).exp_m1();
            let em = (u[k * n + i - 1] - c).exp_m1();
            let ht = (ep_t - em_t) / (2.0 * dt);
            let hxx = (ep + em) / (dx * dx);
            let hx = (ep - em) / (2.0 * dx);
            vals.push(ht + 0.5 * a * hxx + b(t, xs[i]) * hx);
        }
    }
    Ok(ResidualGrid::new(
        times[1..times.len() - 1].to_vec(),
        xs[1..n - 1].to_vec(),
        vals,
        band,
        dt,
    ))
}

/// Central-difference residual of `∂_t p - ½ a ∂²_x p + ∂_x((b + a ∂_x u) p)`.
pub fn fokker_planck_table(
    p: &[f64],
    u: &[f64],
    times: &[f64],
    grid: &Grid,
    a: f64,
    b: impl Fn(f64, f64) -> f64,
    band: f64,
) -> Result<ResidualGrid> {
    require_1d(grid, 5, times.len(), 3)?;
    let n = grid.len();
    let dt = times[1] - times[0];
    let dx = grid.spacing(0);
    let xs = grid.axis_coords(0);
    let mut vals = Vec::with_capacity((times.len() - 2) * (n - 2));
    for k in 1..times.len() - 1 {
        let t = times[k];
        let row = |i: usize| k * n + i;
        // flux f = (b + a u_x) p at every point (one-sided at the ends, unused there)
        let flux: Vec<f64> = (0..n)
            .map(|i| {
                let ux = if i == 0 {
                    (u[row(1)] - u[row(0)]) / dx
                } else if i == n - 1 {
                    (u[row(n - 1)] - u[row(n - 2)]) / dx
                } else {
                    (u[row(i + 1)] - u[row(i - 1)]) / (2.0 * dx)
                };
                (b(t, xs[i]) + a * ux) * p[row(i)]
            })
            .collect();
        for i in 1..n - 1 {
            let pt = (p[(k + 1) * n + i] - p[(k - 1) * n + i]) / (2.0 * dt);
            let pxx = (p[row(i + 1)] - 2.0 * p[row(i)] + p[row(i - 1)]) / (dx * dx);
            let div = (flux[i + 1] - flux[i - 1]) / (2.0 * dx);
            vals.push(pt - 0.5 * a * pxx + div);
        }
    }
    Ok(ResidualGrid::new(
        times[1..times.len() - 1].to_vec(),
        xs[1..n - 1].to_vec(),
        vals,
        band,
        dt,
    ))
}

/// Smooth compactly supported bump `exp(-1/(1 - r²))` with `r = (x - centre)/radius`.
pub fn bump(centre: f64, radius: f64, x: f64) -> f64 {
    let r = (x - centre) / radius;
    if r.abs() >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - r * r)).exp()
    }
}

impl ResidualGrid {
    /// `∫ r(t_k, x) φ(x) dx` for each time row.
    pub fn weak(&self, phi: impl Fn(f64) -> f64) -> Vec<f64> {
        let n = self.xs.len();
        let dx = if n > 1 { self.xs[1] - self.xs[0] } else { 1.0 };
        (0..self.times.len())
            .map(|k| (0..n).map(|i| self.values[k * n + i] * phi(self.xs[i]) * dx).sum())
            .collect()
    }
}

/// Default band width excluded from interior norms: 5% of the domain on each side.
fn default_band(grid: &Grid) -> f64 {
    0.05 * (grid.upper()[0] - grid.lower()[0])
}

/// Residual of the backward equation `A_t h = 0` on the model's tables.
pub fn backward_pde_residual(model: &BridgeModel) -> Result<ResidualGrid> {
    require_1d(model.grid(), 5, model.times().len(), 5)?;
    let h: Vec<f64> = model.log_h.iter().map(|v| v.exp()).collect();
    let gen = Generator1d { a: model.diffusion[0][0], transition: model.transition() };
    backward_residual_table(&h, model.times(), model.grid(), gen.a, |t, x| gen.b(t, x), default_band(model.grid()))
}

/// HJB residual with `u = log h` in chain-rule form (equal to the backward residual over `h`).
pub fn hjb_chain_rule_residual(model: &BridgeModel) -> Result<ResidualGrid> {
    require_1d(model.grid(), 5, model.times().len(), 5)?;
    let gen = Generator1d { a: model.diffusion[0][0], transition: model.transition() };
    hjb_chain_rule_table(&model.log_h, model.times(), model.grid(), gen.a, |t, x| gen.b(t, x), default_band(model.grid()))
}

/// Analytic `(h, ∂_x h, ∂²_x h)` at `(t, x)` in one dimension.
pub fn h_derivatives_1d(model: &BridgeModel, t: f64, x: f64) -> Result<(f64, f64, f64)> {
    require_1d(model.grid(), 1, 1, 1)?;
    let g = model.transition().affine(1, t, 1.0)?;
    let inv = g.cov.inv[0];
    let f = &model.factor2;
    let norm = g.norm();
    let (mut h, mut hx, mut hxx) = (0.0, 0.0, 0.0);
    for j in 0..f.len() {
        let r = f.coords[j] - g.alpha * x - g.offset[0];
        let p = (f.log_w[j] + norm - 0.5 * inv * r * r).exp();
        let gr = g.alpha * inv * r;
        h += p;
        hx += p * gr;
        hxx += p * (gr * gr - g.alpha * g.alpha * inv);
    }
    Ok((h, hx, hxx))
}

/// One row of a spatial order study.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OrderStudyRow {
    pub step: f64,
    /// `max |½ a D²h + b Dh - (½ a h'' + b h')|` over the probe points.
    pub max_error: f64,
}

/// Spatial truncation error of the backward stencil at time `t` for each step size, using
/// the quadrature `h` off the grid and analytic derivatives as reference.
pub fn spatial_order_study(model: &BridgeModel, t: f64, xs: &[f64], steps: &[f64]) -> Result<Vec<OrderStudyRow>> {
    require_1d(model.grid(), 1, 1, 1)?;
    let a = model.diffusion[0][0];
    let hv = |x: f64| model.log_h_at(t, &[x]).map(f64::exp);
    steps
        .iter()
        .map(|&s| {
            let mut err = 0.0f64;
            for &x in xs {
                let (h0, hx, hxx) = h_derivatives_1d(model, t, x)?;
                let (hp, hm) = (hv(x + s)?, hv(x - s)?);
                let b = model.transition().drift(t, &[x])?[0];
                let fd = 0.5 * a * (hp - 2.0 * h0 + hm) / (s * s) + b * (hp - hm) / (2.0 * s);
                err = err.max((fd - (0.5 * a * hxx + b * hx)).abs());
            }
            Ok(OrderStudyRow { step: s, max_error: err })
        })
        .collect()
}

/// The mean-field potential `u(t, x, P_t)` obtained by re-solving at each field time.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MeanFieldField {
    pub times: Vec<f64>,
    /// Row per time.
    pub u_values: Vec<f64>,
    /// Bridge marginal densities `p(t, x)`, row per time.
    pub marginal_densities: Vec<f64>,
    /// `log(ν₂ᵗ / cell volume)` from each re-solve, row per time.
    pub terminal_u: Vec<f64>,
    /// `sup |u(t,·) - log h(t,·)|` per time.
    pub deviations: Vec<f64>,
}

/// Build the field at the given times (uniformly spaced, all in `[0, 1)`).
pub fn build_meanfield_field(model: &BridgeModel, times: &[f64]) -> Result<MeanFieldField> {
    if times.len() < 3 {
        return Err(Error::GridTooCoarse("need at least 3 field times".into()));
    }
    let dt = times[1] - times[0];
    if !(dt > 0.0) || times.windows(2).any(|w| ((w[1] - w[0]) - dt).abs() > 1e-9 * dt.max(1e-300) + 1e-15) {
        return Err(Error::invalid("field times must be increasing and uniformly spaced"));
    }
    let vol = model.grid().cell_volume();
    let mut field = MeanFieldField {
        times: times.to_vec(),
        u_values: Vec::new(),
        marginal_densities: Vec::new(),
        terminal_u: Vec::new(),
        deviations: Vec::new(),
    };
    for &t in times {
        let pt = model.marginal_flow(t)?.normalized()?;
        let rep = model.recompute_u_with_marginal(t, &pt)?;
        field.u_values.extend_from_slice(&rep.u1);
        field.marginal_densities.extend(pt.weights().iter().map(|w| w / vol));
        field
            .terminal_u
            .extend(rep.solution.nu2.weights().iter().map(|w| (w / vol).ln()));
        field.deviations.push(rep.max_deviation);
    }
    Ok(field)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MeanFieldResiduals {
    pub fokker_planck: ResidualGrid,
    pub hjb: ResidualGrid,
    /// `max |u(1,·) - log(dν₂/dx)|` over field times and support points of `ν₂` at least
    /// `terminal_band` from the boundary.
    pub terminal_error: f64,
    /// Two reference standard deviations over the unit horizon, capped at a quarter of the
    /// domain; closer to the edge the truncated domain breaks the Chapman–Kolmogorov relation.
    pub terminal_band: f64,
    /// Integrated residuals against bump test functions, per (bump, interior time).
    pub weak_fokker_planck: Vec<Vec<f64>>,
    pub weak_hjb: Vec<Vec<f64>>,
}

/// Finite-difference residuals of the Fokker–Planck and HJB equations along the bridge flow.
pub fn meanfield_residuals(model: &BridgeModel, field: &MeanFieldField) -> Result<MeanFieldResiduals> {
    let grid = model.grid();
    require_1d(grid, 5, field.times.len(), 3)?;
    let a = model.diffusion[0][0];
    let gen = Generator1d { a, transition: model.transition() };
    let band = default_band(grid);
    let fp = fokker_planck_table(&field.marginal_densities, &field.u_values, &field.times, grid, a, |t, x| gen.b(t, x), band)?;
    let hjb = hjb_residual_table(&field.u_values, &field.times, grid, a, |t, x| gen.b(t, x), band)?;
    let target = model.log_h_terminal();
    let n = grid.len();
    let (lo, hi) = (grid.lower()[0], grid.upper()[0]);
    let terminal_band = (2.0 * model.transition().max_sd(1, 0.0, 1.0)?).min(0.25 * (hi - lo));
    let support: Vec<usize> = model
        .nu2()
        .support()
        .into_iter()
        .filter(|&i| {
            let y = grid.coord(0, i);
            y - lo >= terminal_band && hi - y >= terminal_band
        })
        .collect();
    let mut terminal_error = 0.0f64;
    for k in 0..field.times.len() {
        for &i in &support {
            terminal_error = terminal_error.max((field.terminal_u[k * n + i] - target[i]).abs());
        }
    }
    let centre = 0.5 * (lo + hi);
    let radius = 0.25 * (hi - lo);
    let bumps = [centre - radius, centre, centre + radius];
    let weak_fokker_planck = bumps.iter().map(|&c| fp.weak(|x| bump(c, radius, x))).collect();
    let weak_hjb = bumps.iter().map(|&c| hjb.weak(|x| bump(c, radius, x))).collect();
    Ok(MeanFieldResiduals {
        fokker_planck: fp,
        hjb,
        terminal_error,
        terminal_band,
        weak_fokker_planck,
        weak_hjb,
    })
}

/// `(t, BL(P_t, P₀), mass of P_t)` for each `t`: the bridge marginal approaching `P₀`.
pub fn initial_condition_check(model: &BridgeModel, ts: &[f64]) -> Result<Vec<(f64, f64, f64)>> {
    ts.iter()
        .map(|&t| {
            let pt = model.marginal_flow(t)?;
            let d = bounded_lipschitz_distance(&pt, model.p0())?;
            Ok((t, d, pt.total_mass()))
        })
        .collect()
}
