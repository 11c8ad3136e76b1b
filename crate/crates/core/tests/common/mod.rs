#![allow(dead_code)]

use bridgekit::{DiscreteMeasure, Grid, Kernel, KernelMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Density weights on a 1-D grid, each cell drawn from `[0.05, 1]` before normalising.
pub fn random_density(rng: &mut ChaCha8Rng, grid: &Grid) -> DiscreteMeasure {
    let w: Vec<f64> = (0..grid.len()).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = w.iter().sum();
    DiscreteMeasure::on_grid(grid, w.into_iter().map(|v| v / s).collect()).unwrap()
}

/// A heat kernel on a random interval, or a random positive matrix, with random density
/// marginals of sizes `n1` and `n2`.
pub fn random_instance(
    rng: &mut ChaCha8Rng,
    n1: usize,
    n2: usize,
    heat: bool,
) -> (KernelMatrix, DiscreteMeasure, DiscreteMeasure) {
    // Heat kernels keep log(M_q/m_q) = 2 half² / tau ≤ 6; IPF contracts at rate
    // tanh²(log(M_q/m_q) / 2), which is too slow for the iteration budget beyond ~10.
    let tau = rng.random_range(0.5..2.0);
    let half = rng.random_range(0.5..(3.0f64 * tau).sqrt().min(3.0));
    let g1 = Grid::uniform_1d(-half, half, n1).unwrap();
    let g2 = Grid::uniform_1d(-half, half, n2).unwrap();
    let q = if heat {
        Kernel::heat(1.0, tau).as_matrix_on(&g1, &g2).unwrap()
    } else {
        let log: Vec<f64> = (0..n1 * n2).map(|_| rng.random_range(-2.0..2.0)).collect();
        KernelMatrix::from_log(n1, n2, log).unwrap()
    };
    (q, random_density(rng, &g1), random_density(rng, &g2))
}

/// `N(0, 0.5²)` on 601 points of `[-6, 6]`.
pub fn canonical_gaussian() -> (Grid, DiscreteMeasure) {
    let g = Grid::uniform_1d(-6.0, 6.0, 601).unwrap();
    let p = DiscreteMeasure::probability_from_density(&g, |x| (-x[0] * x[0] / 0.5).exp()).unwrap();
    (g, p)
}

pub fn gaussian_on(grid: &Grid, mean: f64, sd: f64) -> DiscreteMeasure {
    DiscreteMeasure::probability_from_density(grid, |x| (-(x[0] - mean).powi(2) / (2.0 * sd * sd)).exp())
        .unwrap()
}
