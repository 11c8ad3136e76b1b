//! The value functional `V(P₁)` of the Schrödinger problem with fixed `P₀` and its convex conjugate.
//!
//! `V(P₁) = ∫ log(dν₂/dx) dP₁ - ∫ log(∫ q(x,y) ν₂(dy)) P₀(dx)` where `ν₂` solves the system for
//! `(P₀, P₁)`; the conjugate is `V*(ψ) = ∫ log(∫ q(x,y) e^{ψ(y)} dy) P₀(dx)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hpath::BridgeModel;
use crate::kernel::KernelMatrix;
use crate::measure::{tv_norm, DiscreteMeasure};
use crate::numerics::log_sum_exp_by;
use crate::solver::{solve, SchrodingerSolution, SolverConfig};

#[derive(Clone, Debug)]
pub struct DualityInstance {
    q: KernelMatrix,
    p0: DiscreteMeasure,
    p1: DiscreteMeasure,
    cfg: SolverConfig,
    solution: SchrodingerSolution,
}

impl DualityInstance {
    /// The instance of a bridge model: `q = p(0,·;1,·)` on the model grid and its solution.
    pub fn from_model(model: &BridgeModel) -> Result<Self> {
        let grid = model.grid();
        let q = model.transition().kernel(0.0, 1.0)?.as_matrix_on(grid, grid)?;
        Ok(Self {
            q,
            p0: model.p0().clone(),
            p1: model.p1().clone(),
            cfg: model.spec().solver.clone(),
            solution: model.solution().clone(),
        })
    }

    /// `q` is a transition density on `P₀`-points × `P₁`-points; `P₁`'s cell volume is the `dy`.
    pub fn new(q: KernelMatrix, p0: DiscreteMeasure, p1: DiscreteMeasure, cfg: &SolverConfig) -> Result<Self> {
        let solution = solve(&q, &p0, &p1, cfg)?;
        Ok(Self { q, p0, p1, cfg: cfg.clone(), solution })
    }

    pub fn solution(&self) -> &SchrodingerSolution {
        &self.solution
    }

    pub fn p0(&self) -> &DiscreteMeasure {
        &self.p0
    }

    pub fn p1(&self) -> &DiscreteMeasure {
        &self.p1
    }

    fn log_dy(&self) -> f64 {
        self.p1.cell_volume().ln()
    }

    /// `log(dν₂/dx)` on the support of `ν₂`; `-∞` elsewhere.
    pub fn dual_potential(&self) -> Vec<f64> {
        let ly = self.log_dy();
        self.solution.nu2.weights().iter().map(|w| w.ln() - ly).collect()
    }

    /// `V(P₁)` for the instance's own `P₁`.
    pub fn v_value(&self) -> f64 {
        value_from_solution(&self.q, &self.p0, &self.p1, &self.solution)
    }

    /// `V(P)` for another terminal law on the same points (re-solves).
    pub fn v_of(&self, p1: &DiscreteMeasure) -> Result<f64> {
        let sol = solve(&self.q, &self.p0, p1, &self.cfg)?;
        Ok(value_from_solution(&self.q, &self.p0, p1, &sol))
    }

    /// Closed-form conjugate `V*(ψ)`.
    pub fn v_star(&self, psi: &[f64]) -> Result<f64> {
        if psi.len() != self.q.cols() {
            return Err(Error::invalid("ψ must have one value per terminal point"));
        }
        let ly = self.log_dy();
        let mut v = 0.0;
        for (x, &w) in self.p0.weights().iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            v += w * log_sum_exp_by(psi.len(), |y| self.q.log_at(x, y) + ly + psi[y]);
        }
        Ok(v)
    }

    /// The measure `G_y = ν₂_y Σ_x P₀_x q(x,y) / h(x)`: the derivative of `V*` at the dual
    /// potential, which equals `P₁` for an exact solution.
    pub fn gradient_measure(&self) -> Result<DiscreteMeasure> {
        let nu2 = &self.solution.nu2;
        let lnu: Vec<f64> = nu2.weights().iter().map(|w| w.ln()).collect();
        let log_h: Vec<f64> = (0..self.q.rows())
            .map(|x| log_sum_exp_by(lnu.len(), |y| self.q.log_at(x, y) + lnu[y]))
            .collect();
        let p0 = self.p0.weights();
        let g = (0..self.q.cols())
            .map(|y| {
                if nu2.weights()[y] == 0.0 {
                    return 0.0;
                }
                let s = log_sum_exp_by(p0.len(), |x| {
                    if p0[x] == 0.0 {
                        f64::NEG_INFINITY
                    } else {
                        p0[x].ln() + self.q.log_at(x, y) - log_h[x]
                    }
                });
                (lnu[y] + s).exp()
            })
            .collect();
        self.p1.with_weights(g)
    }

    /// `V*(log h(1,·) + εψ)`.
    pub fn v_star_along(&self, eps: f64, psi: &[f64]) -> Result<f64> {
        let f: Vec<f64> = self.dual_potential().iter().zip(psi).map(|(b, p)| b + eps * p).collect();
        self.v_star(&f)
    }

    /// Gateaux checks over several `ε`, the gradient measure distance, and the observed order
    /// of the central quotient between successive `ε`.
    pub fn gateaux_report(&self, psi: &[f64], eps_list: &[f64]) -> Result<GateauxReport> {
        let rows = eps_list
            .iter()
            .map(|&e| self.gateaux_check(psi, e))
            .collect::<Result<Vec<_>>>()?;
        let observed_order = rows
            .windows(2)
            .filter(|w| w[0].central_error > 0.0 && w[1].central_error > 0.0 && w[0].eps != w[1].eps)
            .map(|w| (w[0].central_error / w[1].central_error).ln() / (w[0].eps / w[1].eps).ln())
            .collect();
        Ok(GateauxReport { rows, gradient_tv: self.gradient_tv()?, observed_order })
    }

    /// Difference quotients of `ε ↦ V*(ψ₀ + εψ)` at the dual potential `ψ₀`.
    pub fn gateaux_check(&self, psi: &[f64], eps: f64) -> Result<GateauxCheck> {
        if !(eps > 0.0) {
            return Err(Error::invalid("ε must be positive"));
        }
        let base = self.dual_potential();
        let shifted = |s: f64| -> Vec<f64> {
            base.iter().zip(psi).map(|(b, p)| b + s * p).collect()
        };
        let v0 = self.v_star(&base)?;
        let vp = self.v_star(&shifted(eps))?;
        let vm = self.v_star(&shifted(-eps))?;
        let target = self.p1.integrate(psi);
        let forward = (vp - v0) / eps;
        let central = (vp - vm) / (2.0 * eps);
        Ok(GateauxCheck {
            eps,
            forward,
            central,
            target,
            forward_error: (forward - target).abs(),
            central_error: (central - target).abs(),
        })
    }

    /// `tv(G, P₁)` for the gradient measure.
    pub fn gradient_tv(&self) -> Result<f64> {
        tv_norm(&self.gradient_measure()?, &self.p1)
    }

    /// `V*(ψ)` by maximising `∫ψ dP - V(P)` over probability vectors on the terminal points
    /// with entropic mirror ascent, from several starts. Intended for at most 8 points.
    pub fn v_star_brute(&self, psi: &[f64], opts: &BruteConjugateOptions) -> Result<BruteConjugate> {
        let n = self.q.cols();
        if n > 8 {
            return Err(Error::invalid(format!("brute-force conjugate limited to 8 points, got {n}")));
        }
        if psi.len() != n {
            return Err(Error::invalid("ψ must have one value per terminal point"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut best: Option<BruteConjugate> = None;
        for start in 0..opts.starts.max(1) {
            let mut w: Vec<f64> = if start == 0 {
                vec![1.0 / n as f64; n]
            } else {
                let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.05).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / s).collect()
            };
            let mut value = f64::NEG_INFINITY;
            let mut gap = f64::INFINITY;
            let mut iterations = 0;
            for it in 0..opts.max_iter {
                iterations = it + 1;
                let p = self.p1.with_weights(w.clone())?;
                let sol = solve(&self.q, &self.p0, &p, &self.cfg)?;
                value = p.integrate(psi) - value_from_solution(&self.q, &self.p0, &p, &sol);
                let ly = self.log_dy();
                let grad: Vec<f64> = (0..n).map(|y| psi[y] - (sol.nu2.weights()[y].ln() - ly)).collect();
                let mean: f64 = w.iter().zip(&grad).map(|(a, b)| a * b).sum();
                let top = grad.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                gap = top - mean;
                if gap <= opts.gap_tol {
                    break;
                }
                let m = grad.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for (wi, g) in w.iter_mut().zip(&grad) {
                    *wi *= (opts.step * (g - m)).exp();
                    s += *wi;
                }
                for wi in w.iter_mut() {
                    *wi = (*wi / s).max(1e-300);
                }
            }
            let cand = BruteConjugate { value, frank_wolfe_gap: gap, iterations, starts: start + 1, maximiser: w };
            best = match best {
                Some(b) if b.value >= cand.value => Some(BruteConjugate { starts: start + 1, ..b }),
                _ => Some(cand),
            };
        }
        Ok(best.expect("at least one start"))
    }

    /// Checks `V(λA + (1-λ)B) ≤ λV(A) + (1-λ)V(B)`; returns the largest violation (≤ 0 when
    /// convex along the segment).
    pub fn convexity_check(&self, a: &DiscreteMeasure, b: &DiscreteMeasure, lambdas: &[f64]) -> Result<f64> {
        let va = self.v_of(a)?;
        let vb = self.v_of(b)?;
        let mut worst = f64::NEG_INFINITY;
        for &l in lambdas {
            let w: Vec<f64> = a.weights().iter().zip(b.weights()).map(|(x, y)| l * x + (1.0 - l) * y).collect();
            let m = a.with_weights(w)?;
            worst = worst.max(self.v_of(&m)? - (l * va + (1.0 - l) * vb));
        }
        Ok(worst)
    }
}

fn value_from_solution(q: &KernelMatrix, p0: &DiscreteMeasure, p1: &DiscreteMeasure, sol: &SchrodingerSolution) -> f64 {
    let ly = p1.cell_volume().ln();
    let nu2 = sol.nu2.weights();
    let lnu: Vec<f64> = nu2.iter().map(|w| w.ln()).collect();
    let mut v = 0.0;
    for (y, &w) in p1.weights().iter().enumerate() {
        if w > 0.0 {
            v += w * (lnu[y] - ly);
        }
    }
    for (x, &w) in p0.weights().iter().enumerate() {
        if w > 0.0 {
            v -= w * log_sum_exp_by(lnu.len(), |y| q.log_at(x, y) + lnu[y]);
        }
    }
    v
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GateauxCheck {
    pub eps: f64,
    pub forward: f64,
    pub central: f64,
    /// `∫ ψ dP₁`.
    pub target: f64,
    pub forward_error: f64,
    pub central_error: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GateauxReport {
    pub rows: Vec<GateauxCheck>,
    /// `||G - P₁||`.
    pub gradient_tv: f64,
    /// `log(err_i / err_{i+1}) / log(ε_i / ε_{i+1})` for the central quotient.
    pub observed_order: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BruteConjugateOptions {
    pub step: f64,
    pub max_iter: usize,
    pub gap_tol: f64,
    pub starts: usize,
    pub seed: u64,
}

impl Default for BruteConjugateOptions {
    fn default() -> Self {
        Self { step: 0.5, max_iter: 2000, gap_tol: 1e-9, starts: 3, seed: 0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BruteConjugate {
    pub value: f64,
    /// `max_y g_y - Σ P_y g_y` for the ascent direction `g` at the returned point.
    pub frank_wolfe_gap: f64,
    pub iterations: usize,
    pub starts: usize,
    pub maximiser: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::kernel::TransitionKernel;

    fn instance(n: usize) -> DualityInstance {
        let g = Grid::uniform_1d(-1.5, 1.5, n).unwrap();
        let q = TransitionKernel::brownian(1.0, 0.0).kernel(0.0, 1.0).unwrap().as_matrix_on(&g, &g).unwrap();
        let p0 = DiscreteMeasure::probability_from_density(&g, |x| (-x[0] * x[0]).exp()).unwrap();
        let p1 = DiscreteMeasure::probability_from_density(&g, |x| (-(x[0] - 0.3).powi(2) * 2.0).exp()).unwrap();
        DualityInstance::new(q, p0, p1, &SolverConfig::default()).unwrap()
    }

    #[test]
    fn fenchel_equality_at_dual_potential() {
        let d = instance(6);
        let psi = d.dual_potential();
        let lhs = d.p1().integrate(&psi) - d.v_star(&psi).unwrap();
        assert!((lhs - d.v_value()).abs() < 1e-12);
    }

    #[test]
    fn conjugate_is_shift_covariant() {
        let d = instance(5);
        let psi = [0.1, -0.4, 0.3, 0.0, 0.2];
        let shifted: Vec<f64> = psi.iter().map(|p| p + 0.7).collect();
        assert!((d.v_star(&shifted).unwrap() - d.v_star(&psi).unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn brute_conjugate_rejects_large_grids() {
        let d = instance(9);
        assert!(d.v_star_brute(&[0.0; 9], &BruteConjugateOptions::default()).is_err());
    }
}
