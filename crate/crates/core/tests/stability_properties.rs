mod common;

use bridgekit::{
    exhaustion_solve, geometric_levels, holder_exponent_fit, holder_fit_points, restriction_inequality,
    stability_experiment, DiscreteMeasure, Error, ExhaustionScheme, Grid, Kernel, PerturbationFamily,
    Problem, SolverConfig,
};
use proptest::prelude::*;

fn heat_problem(n: usize) -> (Grid, Problem) {
    let g = Grid::uniform_1d(-2.0, 2.0, n).unwrap();
    let q = Kernel::heat(1.0, 1.0).as_matrix_on(&g, &g).unwrap();
    let mu1 = common::gaussian_on(&g, 0.3, 0.6);
    let mu2 = common::gaussian_on(&g, -0.2, 0.5);
    (g, Problem::new(q, mu1, mu2).unwrap())
}

fn cfg() -> SolverConfig {
    SolverConfig::default()
}

#[test]
fn unperturbed_kernel_family_has_zero_distances() {
    let (_, p) = heat_problem(21);
    let fam = PerturbationFamily::kernel_mollification(&p, &[0.0, 0.0]).unwrap();
    let rep = stability_experiment(&fam, &cfg()).unwrap();
    for l in &rep.levels {
        assert_eq!(l.delta, 0.0);
        assert!(l.solution_delta <= 10.0 * cfg().tol);
        assert!(l.u_sup_distance <= 10.0 * cfg().tol);
    }
}

#[test]
fn kernel_scaling_moves_potentials_by_half_log() {
    let (_, p) = heat_problem(17);
    let ns = [1.0, 2.0, 4.0, 8.0, 16.0];
    let eps: Vec<f64> = ns.iter().map(|n| 1.0 / n).collect();
    let fam = PerturbationFamily::kernel_scaling(&p, &eps).unwrap();
    let rep = stability_experiment(&fam, &cfg()).unwrap();
    for (l, n) in rep.levels.iter().zip(ns) {
        // ½ log(1 + 1/n) for each of u₁ and u₂
        let want = 0.5 * (1.0 + 1.0 / n).ln();
        assert!((l.u_sup_distance - 2.0 * want).abs() < 1e-9, "{l:?}");
        assert!((l.u_pointwise_distance - 2.0 * want).abs() < 1e-9);
    }
    assert!(rep.monotone);
}

#[test]
fn mixture_family_decays() {
    // exp(-|x-y|²/2), so M_q = 1 and the factors have mass of order one; μ' is μ₁ shifted by 0.2.
    let (g, p) = heat_problem(31);
    let q = p.q.scaled((2.0 * std::f64::consts::PI).sqrt());
    let p = Problem::new(q, p.mu1, p.mu2).unwrap();
    let other = common::gaussian_on(&g, 0.5, 0.6);
    let ns: Vec<f64> = (0..=10).map(|k| 2f64.powi(k)).collect();
    let eps: Vec<f64> = ns.iter().map(|n| 1.0 / n).collect();
    let fam = PerturbationFamily::marginal_mixture(&p, &other, None, &eps).unwrap();
    let rep = stability_experiment(&fam, &cfg()).unwrap();
    assert!(rep.monotone);
    let last = rep.final_level().unwrap();
    assert_eq!(last.parameter, 1.0 / 1024.0);
    assert!(rep.converged_below(1e-3), "{last:?}");
}

#[test]
fn dilation_and_mollification_decay() {
    let (g, p) = heat_problem(41);
    let eps = geometric_levels(1e-1, 1e-4, 7);
    for fam in [
        PerturbationFamily::support_dilation(&p, &g, &[0.0], &eps).unwrap(),
        PerturbationFamily::kernel_mollification(&p, &eps).unwrap(),
    ] {
        let rep = stability_experiment(&fam, &cfg()).unwrap();
        assert!(rep.monotone, "{}", fam.name);
        let d = fam.deltas();
        assert!(d.windows(2).all(|w| w[1] <= w[0]));
        assert!(rep.final_level().unwrap().solution_delta < 1e-2);
    }
}

#[test]
fn tiny_inputs_give_tiny_outputs() {
    let (g, p) = heat_problem(25);
    let other = DiscreteMeasure::uniform(&g).unwrap();
    let fam = PerturbationFamily::marginal_mixture(&p, &other, Some(&other), &[1e-9, 1e-10]).unwrap();
    let rep = stability_experiment(&fam, &cfg()).unwrap();
    for l in &rep.levels {
        assert!(l.delta < 1e-8);
        assert!(l.solution_delta < 1e-6, "{l:?}");
    }
}

#[test]
fn constant_kernel_fit_is_linear() {
    let g = Grid::uniform_1d(-1.0, 1.0, 12).unwrap();
    let q = Kernel::constant(3.0).as_matrix_on(&g, &g).unwrap();
    let mut rng = common::rng(5);
    let (m1, m2) = (common::random_density(&mut rng, &g), common::random_density(&mut rng, &g));
    let p = Problem::new(q, m1, m2).unwrap();
    let other = DiscreteMeasure::uniform(&g).unwrap();
    let fam = PerturbationFamily::marginal_mixture(&p, &other, None, &geometric_levels(1e-1, 1e-5, 9)).unwrap();
    let fit = holder_exponent_fit(&stability_experiment(&fam, &cfg()).unwrap()).unwrap();
    // ν = μ/√κ, so solution distances are marginal distances divided by κ.
    assert!((fit.slope - 1.0).abs() < 1e-6, "{fit:?}");
    assert!((fit.intercept + 3f64.ln()).abs() < 1e-5);
    assert!(fit.envelope_holds && fit.slope >= 0.5 && fit.decades >= 3.9);
}

#[test]
fn heat_mixture_points_sit_below_the_envelope() {
    let (g, p) = heat_problem(31);
    let other = common::gaussian_on(&g, -0.8, 0.3);
    let fam =
        PerturbationFamily::marginal_mixture(&p, &other, Some(&other), &geometric_levels(1e-1, 1e-6, 11)).unwrap();
    let fit = holder_exponent_fit(&stability_experiment(&fam, &cfg()).unwrap()).unwrap();
    assert!(fit.envelope_holds && fit.decades >= 3.0);
    assert!(fit.c_hat.is_finite() && fit.c_hat > 0.0);
}

#[test]
fn holder_fit_input_errors() {
    assert!(matches!(holder_fit_points(&[(0.1, 0.1), (0.1, 0.1), (0.1, 0.1)]), Err(Error::DegenerateRegression(_))));
    assert!(matches!(holder_fit_points(&[(0.1, 0.1), (0.01, 0.01)]), Err(Error::DegenerateRegression(_))));
    let (_, p) = heat_problem(9);
    let fam = PerturbationFamily::kernel_scaling(&p, &[0.1, 0.01, 0.001]).unwrap();
    assert!(holder_exponent_fit(&stability_experiment(&fam, &cfg()).unwrap()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn restriction_inequality_holds(
        seed in any::<u64>(), n in 3usize..20, eps in 0.0..1.0f64,
        lo1 in 0usize..10, lo2 in 0usize..10, len1 in 1usize..10, len2 in 1usize..10,
    ) {
        let g = Grid::uniform_1d(0.0, 1.0, n).unwrap();
        let mut rng = common::rng(seed);
        let (m1, m2, o1, o2) = (
            common::random_density(&mut rng, &g),
            common::random_density(&mut rng, &g),
            common::random_density(&mut rng, &g),
            common::random_density(&mut rng, &g),
        );
        let mix = |a: &DiscreteMeasure, b: &DiscreteMeasure| {
            a.with_weights(a.weights().iter().zip(b.weights()).map(|(x, y)| (1.0 - eps) * x + eps * y).collect()).unwrap()
        };
        let w1: Vec<usize> = (lo1.min(n - 1)..(lo1 + len1).min(n)).collect();
        let w2: Vec<usize> = (lo2.min(n - 1)..(lo2 + len2).min(n)).collect();
        let chk = restriction_inequality(&mix(&m1, &o1), &mix(&m2, &o2), &m1, &m2, &w1, &w2).unwrap();
        prop_assert!(chk.holds, "{:?}", chk);
    }
}

#[test]
fn full_windows_reproduce_the_coupling() {
    let g = Grid::uniform_1d(-2.0, 2.0, 12).unwrap();
    let q = Kernel::heat(1.0, 1.0).as_matrix_on(&g, &g).unwrap();
    let mu = common::gaussian_on(&g, 0.0, 0.7);
    let all: Vec<usize> = (0..12).collect();
    let scheme = ExhaustionScheme::new(vec![all.clone(), all.clone(), all], &mu, &mu).unwrap();
    let (_, rep) = exhaustion_solve(&q, &mu, &mu, &scheme, &cfg(), &[]).unwrap();
    assert_eq!(rep.n0, 1);
    for l in &rep.levels {
        assert!(l.bl_distance <= 1e-12, "{l:?}");
    }
}

#[test]
fn uniform_sixteen_point_windows() {
    let g = Grid::uniform_1d(0.0, 1.5, 16).unwrap();
    let q = Kernel::heat(1.0, 0.5).as_matrix_on(&g, &g).unwrap();
    let mu = DiscreteMeasure::uniform(&g).unwrap();
    let scheme = ExhaustionScheme::new(vec![(4..12).collect(), (2..14).collect(), (0..16).collect()], &mu, &mu).unwrap();
    let (sols, rep) = exhaustion_solve(&q, &mu, &mu, &scheme, &cfg(), &[]).unwrap();
    assert_eq!(sols.len(), 3);
    assert!(rep.monotone);
    assert!(rep.levels[0].bl_distance > rep.levels[1].bl_distance);
    assert_eq!(rep.levels[2].bl_distance, 0.0);
}

#[test]
fn windows_without_mass_are_refused() {
    let g = Grid::uniform_1d(0.0, 4.0, 5).unwrap();
    let q = Kernel::heat(1.0, 1.0).as_matrix_on(&g, &g).unwrap();
    let mu = DiscreteMeasure::on_grid(&g, vec![0.0, 0.0, 0.0, 0.5, 0.5]).unwrap();
    let scheme = ExhaustionScheme::new(vec![vec![0, 1], vec![0, 1, 2, 3], (0..5).collect()], &mu, &mu).unwrap();
    assert_eq!(scheme.n0, 2);
    assert!(matches!(
        exhaustion_solve(&q, &mu, &mu, &scheme, &cfg(), &[1]),
        Err(Error::BelowN0 { requested: 1, n0: 2 })
    ));
    let (_, rep) = exhaustion_solve(&q, &mu, &mu, &scheme, &cfg(), &[2, 3]).unwrap();
    assert_eq!(rep.levels.len(), 2);
}

#[test]
fn box_windows_nest() {
    let g = Grid::uniform_1d(-5.0, 5.0, 41).unwrap();
    let w = ExhaustionScheme::boxes(&g, &[0.0], &[1.0, 2.5, 5.0]);
    assert!(w.windows(2).all(|p| p[0].iter().all(|i| p[1].contains(i))));
    assert_eq!(w[2].len(), 41);
}
