mod common;

use bridgekit::{
    brute_force_solve, normalize_pair, potentials, product_tv_norm, solve, solve_from, tv_norm,
    verify_solution, DiscreteMeasure, Grid, Kernel, KernelMatrix, SolverConfig,
};
use proptest::prelude::*;

fn cfg() -> SolverConfig {
    SolverConfig::default()
}

/// One sweep `u₁ ← log Σ_y q(x,y) e^{-u₂(y)} μ₂(y)`, written out directly.
fn sweep(q: &KernelMatrix, mu2: &DiscreteMeasure, u2: &[f64]) -> Vec<f64> {
    (0..q.rows())
        .map(|i| {
            let terms: Vec<f64> = (0..q.cols())
                .filter(|&j| mu2.weights()[j] > 0.0)
                .map(|j| q.log_at(i, j) - u2[j] + mu2.weights()[j].ln())
                .collect();
            let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
        })
        .collect()
}

fn sup(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn converged_solutions_satisfy_bounds_and_marginals(
        seed in any::<u64>(), n1 in 2usize..24, n2 in 2usize..24, heat in any::<bool>()
    ) {
        let (q, mu1, mu2) = common::random_instance(&mut common::rng(seed), n1, n2, heat);
        let sol = solve(&q, &mu1, &mu2, &cfg()).unwrap();
        let rep = verify_solution(&q, &mu1, &mu2, &sol).unwrap();
        prop_assert!(rep.max_residual() <= 1e-10);
        prop_assert_eq!(rep.mass_bound_violation, 0.0);
        prop_assert_eq!(rep.potential_bound_violation, 0.0);
        prop_assert!(rep.gauge_gap < 1e-14);
    }

    #[test]
    fn solution_is_a_fixed_point(seed in any::<u64>(), n in 2usize..16, heat in any::<bool>()) {
        let (q, mu1, mu2) = common::random_instance(&mut common::rng(seed), n, n + 1, heat);
        let c = cfg();
        let sol = solve(&q, &mu1, &mu2, &c).unwrap();
        let next = sweep(&q, &mu2, &sol.u2);
        prop_assert!(sup(&next, &sol.u1) < 10.0 * c.tol, "{}", sup(&next, &sol.u1));
    }

    #[test]
    fn initialisation_does_not_change_the_product(seed in any::<u64>(), n in 2usize..20, heat in any::<bool>()) {
        let (q, mu1, mu2) = common::random_instance(&mut common::rng(seed), n, n, heat);
        let a = solve(&q, &mu1, &mu2, &cfg()).unwrap();
        let ones = vec![1.0; n];
        let b = solve_from(&q, &mu1, &mu2, &cfg(), Some(&ones)).unwrap();
        let d = product_tv_norm(&a.nu1, &a.nu2, &b.nu1, &b.nu2).unwrap();
        prop_assert!(d <= 1e-9, "{}", d);
    }

    #[test]
    fn kernel_scaling_shifts_potentials(seed in any::<u64>(), n in 2usize..16, kappa in 0.01..100.0f64) {
        let (q, mu1, mu2) = common::random_instance(&mut common::rng(seed), n, n, true);
        let a = solve(&q, &mu1, &mu2, &cfg()).unwrap();
        let b = solve(&q.scaled(kappa), &mu1, &mu2, &cfg()).unwrap();
        let shift = 0.5 * kappa.ln();
        for (ua, ub) in a.u1.iter().zip(&b.u1).chain(a.u2.iter().zip(&b.u2)) {
            prop_assert!((ub - ua - shift).abs() <= 1e-10);
        }
        let s = kappa.sqrt();
        prop_assert!(tv_norm(&b.nu1, &a.nu1.scaled(1.0 / s)).unwrap() <= 1e-10);
        prop_assert!(tv_norm(&b.nu2, &a.nu2.scaled(1.0 / s)).unwrap() <= 1e-10);
    }

    #[test]
    fn symmetric_problems_have_symmetric_solutions(seed in any::<u64>(), n in 2usize..20) {
        let mut rng = common::rng(seed);
        let (q, mu, _) = common::random_instance(&mut rng, n, n, true);
        prop_assume!(q.is_symmetric(0.0));
        let sol = solve(&q, &mu, &mu, &cfg()).unwrap();
        prop_assert!(tv_norm(&sol.nu1, &sol.nu2).unwrap() <= 1e-9);
        prop_assert!(sup(&sol.u1, &sol.u2) <= 1e-9);
    }

    #[test]
    fn matches_the_newton_reference(seed in any::<u64>(), n1 in 1usize..9, n2 in 1usize..9, heat in any::<bool>()) {
        let (q, mu1, mu2) = common::random_instance(&mut common::rng(seed), n1.max(2), n2.max(2), heat);
        let a = solve(&q, &mu1, &mu2, &cfg()).unwrap();
        let b = brute_force_solve(&q, &mu1, &mu2).unwrap();
        prop_assert!(tv_norm(&a.nu1, &b.nu1).unwrap() <= 1e-8);
        prop_assert!(tv_norm(&a.nu2, &b.nu2).unwrap() <= 1e-8);
    }

    #[test]
    fn normalising_preserves_the_product(w1 in prop::collection::vec(0.01..2.0f64, 4), w2 in prop::collection::vec(0.01..2.0f64, 4)) {
        let g = Grid::uniform_1d(0.0, 1.0, 4).unwrap();
        let a = DiscreteMeasure::on_grid(&g, w1).unwrap();
        let b = DiscreteMeasure::on_grid(&g, w2).unwrap();
        let (na, nb) = normalize_pair(&a, &b).unwrap();
        prop_assert!((na.total_mass() - nb.total_mass()).abs() <= 1e-14);
        prop_assert!(product_tv_norm(&na, &nb, &a, &b).unwrap() <= 1e-14);
    }
}

#[test]
fn constant_kernel_attains_the_mass_bounds() {
    let g = Grid::uniform_1d(-1.0, 1.0, 9).unwrap();
    let mut rng = common::rng(3);
    let (mu1, mu2) = (common::random_density(&mut rng, &g), common::random_density(&mut rng, &g));
    for kappa in [0.25, 1.0, 7.0] {
        let q = Kernel::constant(kappa).as_matrix_on(&g, &g).unwrap();
        let sol = solve(&q, &mu1, &mu2, &cfg()).unwrap();
        let rep = verify_solution(&q, &mu1, &mu2, &sol).unwrap();
        assert!((sol.nu1.total_mass() - 1.0 / kappa.sqrt()).abs() <= 1e-12);
        assert!((sol.nu2.total_mass() - 1.0 / kappa.sqrt()).abs() <= 1e-12);
        assert_eq!(rep.mass_bound_violation, 0.0);
        for u in sol.u1.iter().chain(&sol.u2) {
            assert!((u - 0.5 * kappa.ln()).abs() <= 1e-12);
        }
        assert!(tv_norm(&sol.nu1, &mu1.scaled(1.0 / kappa.sqrt())).unwrap() <= 1e-12);
    }
}

#[test]
fn two_point_symmetric_example() {
    let g = Grid::uniform_1d(0.0, 1.0, 2).unwrap();
    let mu = DiscreteMeasure::on_grid(&g, vec![0.5, 0.5]).unwrap();
    let q = KernelMatrix::from_values(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
    // ν = (c/2, c/2) with 3c²/4 = 1/2.
    let c = (2.0f64 / 3.0).sqrt();
    for sol in [solve(&q, &mu, &mu, &cfg()).unwrap(), brute_force_solve(&q, &mu, &mu).unwrap()] {
        for nu in [&sol.nu1, &sol.nu2] {
            assert!((nu.total_mass() - c).abs() <= 1e-10);
            assert!((nu.weights()[0] - c / 2.0).abs() <= 1e-10);
        }
        for u in sol.u1.iter().chain(&sol.u2) {
            assert!((u - 0.5 * 1.5f64.ln()).abs() <= 1e-10);
        }
    }
}

#[test]
fn product_kernel_potentials_factor() {
    let g = Grid::uniform_1d(-1.0, 1.0, 7).unwrap();
    let k: Kernel = serde_json::from_str(
        r#"{"kind":"product","f":{"kind":"exp_linear","scale":2.0,"slope":0.5},
            "g":{"kind":"gaussian","scale":1.0,"centre":[0.0],"width":0.7}}"#,
    )
    .unwrap();
    let q = k.as_matrix_on(&g, &g).unwrap();
    let mut rng = common::rng(9);
    let (mu1, mu2) = (common::random_density(&mut rng, &g), common::random_density(&mut rng, &g));
    let sol = solve(&q, &mu1, &mu2, &cfg()).unwrap();
    // For q = f(x)g(y): u₁ = log f + log ∫g dν₂.
    let f = |x: f64| 2.0 * (0.5 * x).exp();
    let gy = |y: f64| (-y * y / (2.0 * 0.49)).exp();
    let int_g: f64 = (0..7).map(|j| gy(g.coord(0, j)) * sol.nu2.weights()[j]).sum();
    for i in 0..7 {
        let want = f(g.coord(0, i)).ln() + int_g.ln();
        assert!((sol.u1[i] - want).abs() < 1e-12, "{} {}", sol.u1[i], want);
    }
}

#[test]
fn potentials_of_uniform_factors() {
    let q = KernelMatrix::from_values(&[vec![1.0, 3.0], vec![2.0, 4.0]]).unwrap();
    let nu = DiscreteMeasure::atoms(vec![vec![0.0], vec![1.0]], vec![0.5, 0.5]).unwrap();
    let (u1, u2) = potentials(&q, &nu, &nu).unwrap();
    assert!((u1[0] - 2.0f64.ln()).abs() < 1e-15 && (u1[1] - 3.0f64.ln()).abs() < 1e-15);
    assert!((u2[0] - 1.5f64.ln()).abs() < 1e-15 && (u2[1] - 3.5f64.ln()).abs() < 1e-15);
}

#[test]
fn bad_inputs_are_rejected() {
    let g = Grid::uniform_1d(0.0, 1.0, 3).unwrap();
    let mu = DiscreteMeasure::uniform(&g).unwrap();
    let q = Kernel::constant(1.0).as_matrix_on(&g, &g).unwrap();
    assert!(solve(&q, &mu.scaled(2.0), &mu, &cfg()).is_err());
    let small = Grid::uniform_1d(0.0, 1.0, 2).unwrap();
    assert!(solve(&q, &DiscreteMeasure::uniform(&small).unwrap(), &mu, &cfg()).is_err());
    assert!(solve(&q, &mu, &mu, &SolverConfig { tol: 0.0, ..cfg() }).is_err());
}
