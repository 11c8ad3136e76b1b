//! Positive kernels `q(x, y)` and transition densities `p(t, x; s, y)` of constant-coefficient
//! reference diffusions.
//!
//! Everything is evaluated in log space; materialised matrices keep `log q` so that Gaussian
//! tails at the edge of a grid never underflow.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::numerics::{log_sum_exp_by, SpdMatrix};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Scalar or matrix coefficient; a scalar `a` means `a * I`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Coefficient {
    Scalar(f64),
    Matrix(Vec<Vec<f64>>),
}

impl Coefficient {
    pub fn resolve(&self, dim: usize) -> Result<Vec<Vec<f64>>> {
        match self {
            Coefficient::Scalar(a) => Ok((0..dim)
                .map(|i| (0..dim).map(|j| if i == j { *a } else { 0.0 }).collect())
                .collect()),
            Coefficient::Matrix(m) => {
                if m.len() != dim || m.iter().any(|r| r.len() != dim) {
                    return Err(Error::invalid(format!("coefficient matrix must be {dim}x{dim}")));
                }
                Ok(m.clone())
            }
        }
    }

    fn dim_hint(&self) -> Option<usize> {
        match self {
            Coefficient::Scalar(_) => None,
            Coefficient::Matrix(m) => Some(m.len()),
        }
    }
}

/// Scalar or vector; a scalar is broadcast to every axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VectorParam {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl VectorParam {
    pub fn resolve(&self, dim: usize) -> Result<Vec<f64>> {
        match self {
            VectorParam::Scalar(v) => Ok(vec![*v; dim]),
            VectorParam::Vector(v) if v.len() == dim => Ok(v.clone()),
            VectorParam::Vector(v) => Err(Error::invalid(format!(
                "vector parameter has length {} but dimension is {dim}",
                v.len()
            ))),
        }
    }

    fn dim_hint(&self) -> Option<usize> {
        match self {
            VectorParam::Scalar(_) => None,
            VectorParam::Vector(v) => Some(v.len()),
        }
    }
}

impl Default for VectorParam {
    fn default() -> Self {
        VectorParam::Scalar(0.0)
    }
}

/// Positive one-variable factor of a separable kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Profile {
    Constant { value: f64 },
    /// `scale * exp(slope · x)`
    ExpLinear { scale: f64, slope: VectorParam },
    /// `scale * exp(-|x - centre|² / (2 width²))`
    Gaussian { scale: f64, centre: VectorParam, width: f64 },
}

impl Profile {
    pub fn log_eval(&self, x: &[f64]) -> Result<f64> {
        let ln_scale = |s: f64| {
            if s > 0.0 && s.is_finite() {
                Ok(s.ln())
            } else {
                Err(Error::invalid(format!("profile scale must be positive, got {s}")))
            }
        };
        match self {
            Profile::Constant { value } => ln_scale(*value),
            Profile::ExpLinear { scale, slope } => {
                let s = slope.resolve(x.len())?;
                Ok(ln_scale(*scale)? + s.iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
            }
            Profile::Gaussian { scale, centre, width } => {
                if !(*width > 0.0) {
                    return Err(Error::invalid("profile width must be positive"));
                }
                let c = centre.resolve(x.len())?;
                let r2: f64 = c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                Ok(ln_scale(*scale)? - r2 / (2.0 * width * width))
            }
        }
    }
}

/// A positive kernel `q(x, y)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Kernel {
    /// Explicit values, row `i` for the `i`-th row point and column `j` for the `j`-th column point.
    Matrix { values: Vec<Vec<f64>> },
    /// Heat kernel: Gaussian density in `y` with mean `x + b tau` and covariance `a tau`.
    Gaussian {
        a: Coefficient,
        #[serde(default)]
        b: VectorParam,
        tau: f64,
    },
    /// Transition density over a time span `tau` of `dX = theta (mean - X) dt + sigma dW`.
    OrnsteinUhlenbeck {
        theta: f64,
        #[serde(default)]
        mean: VectorParam,
        sigma: f64,
        tau: f64,
    },
    Scaled { base: Box<Kernel>, factor: f64 },
    /// Separable kernel `f(x) g(y)`.
    Product { f: Profile, g: Profile },
}

impl Kernel {
    pub fn constant(kappa: f64) -> Self {
        Kernel::Product {
            f: Profile::Constant { value: kappa },
            g: Profile::Constant { value: 1.0 },
        }
    }

    pub fn heat(a: f64, tau: f64) -> Self {
        Kernel::Gaussian {
            a: Coefficient::Scalar(a),
            b: VectorParam::Scalar(0.0),
            tau,
        }
    }

    pub fn scaled(self, factor: f64) -> Self {
        Kernel::Scaled {
            base: Box::new(self),
            factor,
        }
    }

    /// Dimension implied by the kernel parameters, if any.
    pub fn dim_hint(&self) -> Option<usize> {
        match self {
            Kernel::Gaussian { a, b, .. } => a.dim_hint().or(b.dim_hint()),
            Kernel::OrnsteinUhlenbeck { mean, .. } => mean.dim_hint(),
            Kernel::Scaled { base, .. } => base.dim_hint(),
            _ => None,
        }
    }

    fn gaussian_form(&self, dim: usize) -> Result<Option<AffineGaussian>> {
        match self {
            Kernel::Gaussian { a, b, tau } => {
                let tk = TransitionKernel::Brownian {
                    a: a.clone(),
                    b: b.clone(),
                };
                tk.affine(dim, 0.0, *tau).map(Some)
            }
            Kernel::OrnsteinUhlenbeck { theta, mean, sigma, tau } => {
                let tk = TransitionKernel::OrnsteinUhlenbeck {
                    theta: *theta,
                    mean: mean.clone(),
                    sigma: *sigma,
                };
                tk.affine(dim, 0.0, *tau).map(Some)
            }
            _ => Ok(None),
        }
    }

    /// `log q(x, y)`. Matrix kernels have no pointwise form and return an error.
    pub fn log_evaluate(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        if x.len() != y.len() {
            return Err(Error::invalid("kernel arguments differ in dimension"));
        }
        match self {
            Kernel::Matrix { .. } => Err(Error::invalid(
                "matrix kernels can only be materialised on their own grids",
            )),
            Kernel::Gaussian { .. } | Kernel::OrnsteinUhlenbeck { .. } => {
                let g = self.gaussian_form(x.len())?.expect("gaussian variant");
                Ok(g.log_density(x, y))
            }
            Kernel::Scaled { base, factor } => {
                check_factor(*factor)?;
                Ok(base.log_evaluate(x, y)? + factor.ln())
            }
            Kernel::Product { f, g } => Ok(f.log_eval(x)? + g.log_eval(y)?),
        }
    }

    pub fn evaluate(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        self.log_evaluate(x, y).map(f64::exp)
    }

    /// Materialise `Q[i][j] = q(x_i, y_j)`.
    pub fn as_matrix(&self, xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<KernelMatrix> {
        if xs.is_empty() || ys.is_empty() {
            return Err(Error::invalid("kernel grids must be nonempty"));
        }
        match self {
            Kernel::Matrix { values } => {
                if values.len() != xs.len() || values.iter().any(|r| r.len() != ys.len()) {
                    return Err(Error::invalid(format!(
                        "matrix kernel shape does not match the {}x{} grid",
                        xs.len(),
                        ys.len()
                    )));
                }
                KernelMatrix::from_values(values)
            }
            Kernel::Scaled { base, factor } => {
                check_factor(*factor)?;
                Ok(base.as_matrix(xs, ys)?.scaled(*factor))
            }
            _ => {
                let dim = xs[0].len();
                if xs.iter().chain(ys).any(|p| p.len() != dim) {
                    return Err(Error::invalid("kernel grid points differ in dimension"));
                }
                let gauss = self.gaussian_form(dim)?;
                let (n, m) = (xs.len(), ys.len());
                let mut log = Vec::with_capacity(n * m);
                for x in xs {
                    for y in ys {
                        log.push(match &gauss {
                            Some(g) => g.log_density(x, y),
                            None => self.log_evaluate(x, y)?,
                        });
                    }
                }
                KernelMatrix::from_log(n, m, log)
            }
        }
    }

    pub fn as_matrix_on(&self, gx: &Grid, gy: &Grid) -> Result<KernelMatrix> {
        self.as_matrix(&gx.points(), &gy.points())
    }

    pub fn bounds(&self, xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<KernelBounds> {
        Ok(self.as_matrix(xs, ys)?.bounds())
    }
}

fn check_factor(f: f64) -> Result<()> {
    if f > 0.0 && f.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("scale factor must be positive, got {f}")))
    }
}

/// `m_q = min q` and `M_q = max q` over a materialised matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelBounds {
    pub m_q: f64,
    #[serde(rename = "M_q")]
    pub big_m_q: f64,
    pub log_m_q: f64,
    pub log_big_m_q: f64,
}

/// Dense positive matrix stored as `factor * exp(log)`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelMatrix {
    rows: usize,
    cols: usize,
    log: Vec<f64>,
    factor: f64,
    ln_factor: f64,
}

impl KernelMatrix {
    pub fn from_values(values: &[Vec<f64>]) -> Result<Self> {
        let rows = values.len();
        let cols = values.first().map_or(0, |r| r.len());
        if rows == 0 || cols == 0 || values.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("kernel matrix must be rectangular and nonempty"));
        }
        let mut log = Vec::with_capacity(rows * cols);
        for (i, r) in values.iter().enumerate() {
            for (j, &v) in r.iter().enumerate() {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::KernelPositivity { row: i, col: j, value: v });
                }
                log.push(v.ln());
            }
        }
        Ok(Self { rows, cols, log, factor: 1.0, ln_factor: 0.0 })
    }

    pub fn from_log(rows: usize, cols: usize, log: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || log.len() != rows * cols {
            return Err(Error::invalid("kernel matrix must be rectangular and nonempty"));
        }
        if let Some(k) = log.iter().position(|v| !v.is_finite()) {
            return Err(Error::KernelPositivity {
                row: k / cols,
                col: k % cols,
                value: log[k].exp(),
            });
        }
        Ok(Self { rows, cols, log, factor: 1.0, ln_factor: 0.0 })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn log_at(&self, i: usize, j: usize) -> f64 {
        self.log[i * self.cols + j] + self.ln_factor
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.factor * self.log[i * self.cols + j].exp()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows)
            .map(|i| (0..self.cols).map(|j| self.get(i, j)).collect())
            .collect()
    }

    /// `κ Q`; bounds scale by exactly `κ`.
    pub fn scaled(&self, kappa: f64) -> Self {
        let mut out = self.clone();
        out.factor *= kappa;
        out.ln_factor = out.factor.ln();
        out
    }

    pub fn transpose(&self) -> Self {
        let mut log = vec![0.0; self.log.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                log[j * self.rows + i] = self.log[i * self.cols + j];
            }
        }
        Self { rows: self.cols, cols: self.rows, log, ..self.clone() }
    }

    pub fn submatrix(&self, rows: &[usize], cols: &[usize]) -> Self {
        let mut log = Vec::with_capacity(rows.len() * cols.len());
        for &i in rows {
            for &j in cols {
                log.push(self.log[i * self.cols + j]);
            }
        }
        Self { rows: rows.len(), cols: cols.len(), log, ..self.clone() }
    }

    /// Matrix with entry-wise `log` values replaced by `f(i, j, log q_ij)`.
    pub fn map_log(&self, f: impl Fn(usize, usize, f64) -> f64) -> Result<Self> {
        let mut log = Vec::with_capacity(self.log.len());
        for i in 0..self.rows {
            for j in 0..self.cols {
                log.push(f(i, j, self.log_at(i, j)));
            }
        }
        Self::from_log(self.rows, self.cols, log)
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.rows == self.cols
            && (0..self.rows).all(|i| {
                (0..i).all(|j| (self.log[i * self.cols + j] - self.log[j * self.cols + i]).abs() <= tol)
            })
    }

    pub fn bounds(&self) -> KernelBounds {
        let (lo, hi) = self
            .log
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        KernelBounds {
            m_q: self.factor * lo.exp(),
            big_m_q: self.factor * hi.exp(),
            log_m_q: lo + self.ln_factor,
            log_big_m_q: hi + self.ln_factor,
        }
    }

    /// Largest entry-wise difference `max |Q - R|` in linear scale.
    pub fn sup_distance(&self, other: &Self) -> Result<f64> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::invalid("kernel matrices differ in shape"));
        }
        let mut d = 0.0f64;
        for i in 0..self.rows {
            for j in 0..self.cols {
                d = d.max((self.get(i, j) - other.get(i, j)).abs());
            }
        }
        Ok(d)
    }
}

/// Gaussian density in `y` with mean `alpha x + offset` and covariance `cov`.
#[derive(Clone, Debug)]
pub(crate) struct AffineGaussian {
    pub alpha: f64,
    pub offset: Vec<f64>,
    pub cov: SpdMatrix,
    norm: f64,
}

impl AffineGaussian {
    fn new(alpha: f64, offset: Vec<f64>, cov: SpdMatrix) -> Self {
        let norm = -0.5 * (offset.len() as f64 * LN_2PI + cov.log_det);
        Self { alpha, offset, cov, norm }
    }

    #[inline]
    pub fn norm(&self) -> f64 {
        self.norm
    }

    #[inline]
    pub fn log_density(&self, x: &[f64], y: &[f64]) -> f64 {
        let d = x.len();
        if d == 1 {
            let r = y[0] - self.alpha * x[0] - self.offset[0];
            return self.norm - 0.5 * r * r * self.cov.inv[0];
        }
        let mut r = [0.0f64; 8];
        let mut rv;
        let r: &mut [f64] = if d <= 8 {
            &mut r[..d]
        } else {
            rv = vec![0.0; d];
            &mut rv
        };
        for k in 0..d {
            r[k] = y[k] - self.alpha * x[k] - self.offset[k];
        }
        self.norm - 0.5 * self.cov.inv_quad(r)
    }

    /// `∇_x log p(x, y) = alpha Σ⁻¹ (y - alpha x - offset)`.
    pub fn grad_x_log(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        let d = x.len();
        let r: Vec<f64> = (0..d).map(|k| y[k] - self.alpha * x[k] - self.offset[k]).collect();
        self.cov.inv_apply(&r, out);
        for o in out.iter_mut() {
            *o *= self.alpha;
        }
    }

    pub fn variance(&self, axis: usize) -> f64 {
        // diagonal of Σ from the Cholesky factor
        let d = self.cov.dim;
        (0..=axis).map(|j| self.cov.chol[axis * d + j].powi(2)).sum()
    }
}

/// Transition density of a constant-coefficient (or Ornstein–Uhlenbeck) reference diffusion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransitionKernel {
    /// `dX = b dt + σ dW` with `a = σσᵀ`.
    #[serde(alias = "gaussian")]
    Brownian {
        a: Coefficient,
        #[serde(default)]
        b: VectorParam,
    },
    /// `dX = theta (mean - X) dt + sigma dW` (isotropic).
    OrnsteinUhlenbeck {
        theta: f64,
        #[serde(default)]
        mean: VectorParam,
        sigma: f64,
    },
}

impl TransitionKernel {
    pub fn brownian(a: f64, b: f64) -> Self {
        TransitionKernel::Brownian {
            a: Coefficient::Scalar(a),
            b: VectorParam::Scalar(b),
        }
    }

    pub fn ornstein_uhlenbeck(theta: f64, mean: f64, sigma: f64) -> Self {
        TransitionKernel::OrnsteinUhlenbeck {
            theta,
            mean: VectorParam::Scalar(mean),
            sigma,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            TransitionKernel::Brownian { a, b } => {
                let a = a.resolve(dim)?;
                b.resolve(dim)?;
                SpdMatrix::new(&a)
                    .map(|_| ())
                    .ok_or_else(|| Error::invalid("diffusion matrix a must be symmetric positive definite"))
            }
            TransitionKernel::OrnsteinUhlenbeck { theta, mean, sigma } => {
                mean.resolve(dim)?;
                if !(*theta > 0.0 && theta.is_finite()) {
                    return Err(Error::invalid("theta must be positive"));
                }
                if !(*sigma > 0.0 && sigma.is_finite()) {
                    return Err(Error::invalid("sigma must be positive"));
                }
                Ok(())
            }
        }
    }

    pub(crate) fn affine(&self, dim: usize, t: f64, s: f64) -> Result<AffineGaussian> {
        if !(s > t) {
            return Err(Error::DegenerateHorizon { t, s });
        }
        self.validate(dim)?;
        let tau = s - t;
        match self {
            TransitionKernel::Brownian { a, b } => {
                let a = a.resolve(dim)?;
                let cov: Vec<Vec<f64>> =
                    a.iter().map(|r| r.iter().map(|v| v * tau).collect()).collect();
                let cov = SpdMatrix::new(&cov).ok_or_else(|| Error::invalid("covariance is not positive definite"))?;
                let offset = b.resolve(dim)?.iter().map(|v| v * tau).collect();
                Ok(AffineGaussian::new(1.0, offset, cov))
            }
            TransitionKernel::OrnsteinUhlenbeck { theta, mean, sigma } => {
                let alpha = (-theta * tau).exp();
                let var = sigma * sigma * (-(-2.0 * theta * tau).exp_m1()) / (2.0 * theta);
                let cov: Vec<Vec<f64>> = (0..dim)
                    .map(|i| (0..dim).map(|j| if i == j { var } else { 0.0 }).collect())
                    .collect();
                let cov = SpdMatrix::new(&cov).ok_or_else(|| Error::invalid("covariance is not positive definite"))?;
                let offset = mean.resolve(dim)?.iter().map(|m| m * (1.0 - alpha)).collect();
                Ok(AffineGaussian::new(alpha, offset, cov))
            }
        }
    }

    /// `log p(t, x; s, y)`.
    pub fn log_density(&self, t: f64, x: &[f64], s: f64, y: &[f64]) -> Result<f64> {
        Ok(self.affine(x.len(), t, s)?.log_density(x, y))
    }

    pub fn density(&self, t: f64, x: &[f64], s: f64, y: &[f64]) -> Result<f64> {
        self.log_density(t, x, s, y).map(f64::exp)
    }

    /// `∇_x log p(t, x; s, y)`.
    pub fn grad_x_log_density(&self, t: f64, x: &[f64], s: f64, y: &[f64]) -> Result<Vec<f64>> {
        let g = self.affine(x.len(), t, s)?;
        let mut out = vec![0.0; x.len()];
        g.grad_x_log(x, y, &mut out);
        Ok(out)
    }

    /// `(c, θ)` with `b(t, x) = c - θ x`.
    pub(crate) fn drift_affine(&self, dim: usize) -> Result<(Vec<f64>, f64)> {
        match self {
            TransitionKernel::Brownian { b, .. } => Ok((b.resolve(dim)?, 0.0)),
            TransitionKernel::OrnsteinUhlenbeck { theta, mean, .. } => {
                Ok((mean.resolve(dim)?.iter().map(|m| theta * m).collect(), *theta))
            }
        }
    }

    /// Reference drift `b(t, x)`.
    pub fn drift(&self, _t: f64, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            TransitionKernel::Brownian { b, .. } => b.resolve(x.len()),
            TransitionKernel::OrnsteinUhlenbeck { theta, mean, .. } => {
                let m = mean.resolve(x.len())?;
                Ok(x.iter().zip(&m).map(|(xi, mi)| theta * (mi - xi)).collect())
            }
        }
    }

    /// Diffusion matrix `a = σσᵀ`.
    pub fn diffusion(&self, dim: usize) -> Result<Vec<Vec<f64>>> {
        match self {
            TransitionKernel::Brownian { a, .. } => a.resolve(dim),
            TransitionKernel::OrnsteinUhlenbeck { sigma, .. } => {
                Coefficient::Scalar(sigma * sigma).resolve(dim)
            }
        }
    }

    /// The kernel `q(x, y) = p(t, x; s, y)`.
    pub fn kernel(&self, t: f64, s: f64) -> Result<Kernel> {
        if !(s > t) {
            return Err(Error::DegenerateHorizon { t, s });
        }
        Ok(match self {
            TransitionKernel::Brownian { a, b } => Kernel::Gaussian {
                a: a.clone(),
                b: b.clone(),
                tau: s - t,
            },
            TransitionKernel::OrnsteinUhlenbeck { theta, mean, sigma } => Kernel::OrnsteinUhlenbeck {
                theta: *theta,
                mean: mean.clone(),
                sigma: *sigma,
                tau: s - t,
            },
        })
    }

    /// Largest marginal standard deviation of `p(t, x; s, ·)`.
    pub fn max_sd(&self, dim: usize, t: f64, s: f64) -> Result<f64> {
        let g = self.affine(dim, t, s)?;
        Ok((0..dim).map(|k| g.variance(k).sqrt()).fold(0.0, f64::max))
    }
}

/// Result of a Chapman–Kolmogorov quadrature check.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChapmanKolmogorovReport {
    /// `max |∫ p(t,x;r,z) p(r,z;s,y) dz - p(t,x;s,y)|` over the evaluated pairs.
    pub max_residual: f64,
    /// `max_x (1 - Σ_y p(t,x;s,y) vol)` over the evaluated rows.
    pub max_tail_mass: f64,
    pub evaluated_points: usize,
    /// True when the residual is evaluated only on points at least six standard deviations
    /// from the grid boundary.
    pub interior_only: bool,
    pub threshold: f64,
    pub flagged: bool,
}

/// Residual of the Chapman–Kolmogorov identity computed by Riemann quadrature on `grid`.
pub fn verify_chapman_kolmogorov(
    p: &TransitionKernel,
    grid: &Grid,
    t: f64,
    r: f64,
    s: f64,
) -> Result<ChapmanKolmogorovReport> {
    if !(t < r && r < s) {
        return Err(Error::invalid("need t < r < s"));
    }
    let d = grid.dim();
    let g_tr = p.affine(d, t, r)?;
    let g_rs = p.affine(d, r, s)?;
    let g_ts = p.affine(d, t, s)?;
    let sd = p.max_sd(d, t, s)?;
    let pts = grid.points();
    let vol = grid.cell_volume();
    let band = 6.0 * sd;
    let interior: Vec<usize> = (0..pts.len())
        .filter(|&i| {
            (0..d).all(|k| {
                pts[i][k] - grid.lower()[k] >= band && grid.upper()[k] - pts[i][k] >= band
            })
        })
        .collect();
    let interior_only = !interior.is_empty();
    let eval: Vec<usize> = if interior_only { interior } else { (0..pts.len()).collect() };
    let ln_vol = vol.ln();

    let mut max_residual = 0.0f64;
    let mut max_tail = 0.0f64;
    for &i in &eval {
        let x = &pts[i];
        let row_mass = log_sum_exp_by(pts.len(), |j| g_ts.log_density(x, &pts[j])).exp() * vol;
        max_tail = max_tail.max(1.0 - row_mass);
        for &j in &eval {
            let y = &pts[j];
            let composite = log_sum_exp_by(pts.len(), |k| {
                g_tr.log_density(x, &pts[k]) + g_rs.log_density(&pts[k], y) + ln_vol
            })
            .exp();
            let direct = g_ts.log_density(x, y).exp();
            max_residual = max_residual.max((composite - direct).abs());
        }
    }
    let threshold = 1e-6;
    Ok(ChapmanKolmogorovReport {
        max_residual,
        max_tail_mass: max_tail,
        evaluated_points: eval.len(),
        interior_only,
        threshold,
        flagged: max_residual > threshold,
    })
}

/// Symmetric box `[mean - 6 sd, mean + 6 sd]` per axis for the given spread.
pub fn truncation_bounds(mean: &[f64], sd: f64) -> (Vec<f64>, Vec<f64>) {
    (
        mean.iter().map(|m| m - 6.0 * sd).collect(),
        mean.iter().map(|m| m + 6.0 * sd).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts1(xs: &[f64]) -> Vec<Vec<f64>> {
        xs.iter().map(|&x| vec![x]).collect()
    }

    #[test]
    fn constant_kernel_matrix() {
        let q = Kernel::constant(3.0).as_matrix(&pts1(&[0.0, 1.0]), &pts1(&[0.0, 1.0])).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((q.get(i, j) - 3.0).abs() < 1e-15);
            }
        }
        let b = q.bounds();
        assert!((b.m_q - 3.0).abs() < 1e-15 && (b.big_m_q - 3.0).abs() < 1e-15);
    }

    #[test]
    fn heat_kernel_peak() {
        let v = Kernel::heat(1.0, 1.0).evaluate(&[0.0], &[0.0]).unwrap();
        assert!((v - 1.0 / (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn heat_kernel_bounds_on_interval() {
        let g = Grid::uniform_1d(-3.0, 3.0, 61).unwrap();
        let b = Kernel::heat(1.0, 1.0).as_matrix_on(&g, &g).unwrap().bounds();
        let c = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        assert!((b.big_m_q - c).abs() < 1e-15);
        assert!((b.m_q - c * (-18.0f64).exp()).abs() < 1e-22);
    }

    #[test]
    fn matrix_kernel_bounds_and_positivity() {
        let b = KernelMatrix::from_values(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap().bounds();
        assert_eq!((b.m_q, b.big_m_q), (1.0, 2.0));
        let err = KernelMatrix::from_values(&[vec![1.0, 0.0]]).unwrap_err();
        assert!(err.to_string().contains("kernel positivity violated"));
    }

    #[test]
    fn scaled_bounds_are_exact_multiples() {
        let q = KernelMatrix::from_values(&[vec![0.3, 1.7], vec![2.9, 0.1]]).unwrap();
        let b = q.bounds();
        let s = q.scaled(2.5).bounds();
        assert_eq!(s.m_q, 2.5 * b.m_q);
        assert_eq!(s.big_m_q, 2.5 * b.big_m_q);
    }

    #[test]
    fn product_kernel_is_rank_one() {
        let k = Kernel::Product {
            f: Profile::ExpLinear { scale: 2.0, slope: VectorParam::Scalar(0.7) },
            g: Profile::Gaussian { scale: 1.0, centre: VectorParam::Scalar(0.2), width: 0.9 },
        };
        let xs = pts1(&[-1.0, 0.0, 0.5, 2.0]);
        let q = k.as_matrix(&xs, &xs).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                for k2 in 0..4 {
                    for l in 0..4 {
                        let minor = q.get(i, k2) * q.get(j, l) - q.get(i, l) * q.get(j, k2);
                        assert!(minor.abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn transition_shift_equivariance_and_horizon() {
        let p = TransitionKernel::brownian(1.0, 0.0);
        let a = p.density(0.0, &[0.3], 1.0, &[1.1]).unwrap();
        let b = p.density(0.0, &[5.3], 1.0, &[6.1]).unwrap();
        assert!((a - b).abs() < 1e-15);
        assert!(matches!(
            p.density(0.5, &[0.0], 0.5, &[0.0]),
            Err(Error::DegenerateHorizon { .. })
        ));
    }

    #[test]
    fn ou_transition_moments() {
        let p = TransitionKernel::ornstein_uhlenbeck(1.0, 0.0, 2f64.sqrt());
        let g = p.affine(1, 0.0, 1.0).unwrap();
        assert!((g.alpha - (-1f64).exp()).abs() < 1e-15);
        assert!((g.variance(0) - (1.0 - (-2f64).exp())).abs() < 1e-14);
    }

    #[test]
    fn analytic_gradient_matches_finite_difference() {
        let p = TransitionKernel::ornstein_uhlenbeck(0.7, 0.4, 1.3);
        let (x, y) = (0.25, -0.6);
        let g = p.grad_x_log_density(0.2, &[x], 0.9, &[y]).unwrap()[0];
        let h = 1e-5;
        let fd = (p.log_density(0.2, &[x + h], 0.9, &[y]).unwrap()
            - p.log_density(0.2, &[x - h], 0.9, &[y]).unwrap())
            / (2.0 * h);
        assert!((g - fd).abs() < 1e-8);
    }

    #[test]
    fn chapman_kolmogorov_on_wide_grid() {
        let g = Grid::uniform_1d(-8.0, 8.0, 321).unwrap();
        let p = TransitionKernel::brownian(1.0, 0.0);
        let rep = verify_chapman_kolmogorov(&p, &g, 0.0, 0.5, 1.0).unwrap();
        assert!(!rep.flagged, "{rep:?}");
        assert!(rep.max_residual < 1e-6);
    }

    #[test]
    fn chapman_kolmogorov_flags_truncation() {
        let g = Grid::uniform_1d(-1.0, 1.0, 41).unwrap();
        let p = TransitionKernel::brownian(1.0, 0.0);
        let rep = verify_chapman_kolmogorov(&p, &g, 0.0, 0.5, 1.0).unwrap();
        assert!(rep.flagged);
        assert!(rep.max_tail_mass > 0.01);
    }

    #[test]
    fn chapman_kolmogorov_single_point() {
        let g = Grid::uniform_1d(0.0, 0.0, 1).unwrap();
        let p = TransitionKernel::brownian(1.0, 0.0);
        let rep = verify_chapman_kolmogorov(&p, &g, 0.0, 0.5, 1.0).unwrap();
        let half = p.density(0.0, &[0.0], 0.5, &[0.0]).unwrap();
        let full = p.density(0.0, &[0.0], 1.0, &[0.0]).unwrap();
        assert!((rep.max_residual - (half * half - full).abs()).abs() < 1e-15);
    }

    #[test]
    fn kernel_json_roundtrip() {
        let k: Kernel = serde_json::from_str(r#"{"kind":"gaussian","a":1.0,"tau":0.5}"#).unwrap();
        assert_eq!(k, Kernel::heat(1.0, 0.5));
        let s = serde_json::to_string(&Kernel::constant(2.0)).unwrap();
        let back: Kernel = serde_json::from_str(&s).unwrap();
        assert_eq!(back, Kernel::constant(2.0));
    }
}
