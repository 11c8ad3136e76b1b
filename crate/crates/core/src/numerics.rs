//! Small numerical helpers shared across modules.

/// Pairwise (cascade) summation. Summation order depends only on the length,
/// so results are reproducible across runs and thread counts.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if xs.len() <= LEAF {
        let mut s = 0.0;
        for &x in xs {
            s += x;
        }
        return s;
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// `log Σ exp(x_i)`, returning `-inf` for an empty or all `-inf` family.
#[inline]
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for &x in xs {
        if x > max {
            max = x;
        }
    }
    if !max.is_finite() {
        return max;
    }
    let mut s = 0.0;
    for &x in xs {
        s += (x - max).exp();
    }
    max + s.ln()
}

/// Streaming log-sum-exp over an index range.
#[inline]
pub fn log_sum_exp_by(len: usize, mut f: impl FnMut(usize) -> f64) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for i in 0..len {
        let v = f(i);
        if v > max {
            max = v;
        }
    }
    if !max.is_finite() {
        return max;
    }
    let mut s = 0.0;
    for i in 0..len {
        s += (f(i) - max).exp();
    }
    max + s.ln()
}

/// Ordinary least squares fit `y = slope * x + intercept`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Option<(f64, f64)> {
    let n = xs.len();
    if n < 2 || ys.len() != n {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    if sxx <= 0.0 || !sxx.is_finite() {
        return None;
    }
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

/// Dense symmetric positive definite helper: Cholesky factor, inverse and log-determinant.
#[derive(Clone, Debug)]
pub(crate) struct SpdMatrix {
    pub dim: usize,
    /// Lower-triangular factor, row-major.
    pub chol: Vec<f64>,
    /// Inverse, row-major.
    pub inv: Vec<f64>,
    pub log_det: f64,
}

impl SpdMatrix {
    pub fn new(rows: &[Vec<f64>]) -> Option<Self> {
        let dim = rows.len();
        if dim == 0 || rows.iter().any(|r| r.len() != dim) {
            return None;
        }
        let m = nalgebra::DMatrix::from_fn(dim, dim, |i, j| rows[i][j]);
        for i in 0..dim {
            for j in 0..i {
                if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * (1.0 + m[(i, j)].abs()) {
                    return None;
                }
            }
        }
        let chol = m.clone().cholesky()?;
        let l = chol.l();
        let inv = chol.inverse();
        let log_det = 2.0 * (0..dim).map(|i| l[(i, i)].ln()).sum::<f64>();
        Some(Self {
            dim,
            chol: (0..dim * dim).map(|k| l[(k / dim, k % dim)]).collect(),
            inv: (0..dim * dim).map(|k| inv[(k / dim, k % dim)]).collect(),
            log_det,
        })
    }

    /// `vᵀ M⁻¹ v`.
    #[inline]
    pub fn inv_quad(&self, v: &[f64]) -> f64 {
        let d = self.dim;
        let mut s = 0.0;
        for i in 0..d {
            let mut row = 0.0;
            for j in 0..d {
                row += self.inv[i * d + j] * v[j];
            }
            s += v[i] * row;
        }
        s
    }

    /// `M⁻¹ v`.
    pub fn inv_apply(&self, v: &[f64], out: &mut [f64]) {
        let d = self.dim;
        for i in 0..d {
            let mut row = 0.0;
            for j in 0..d {
                row += self.inv[i * d + j] * v[j];
            }
            out[i] = row;
        }
    }

    /// `L v` with `L` the Cholesky factor.
    pub fn chol_apply(&self, v: &[f64], out: &mut [f64]) {
        let d = self.dim;
        for i in 0..d {
            let mut row = 0.0;
            for j in 0..=i {
                row += self.chol[i * d + j] * v[j];
            }
            out[i] = row;
        }
    }
}
