//! Small exactly-known cases, run by `bridgekit selftest`.

use bridgekit::{
    bounded_lipschitz_distance, brute_force_solve, exhaustion_solve, normalize_pair, potentials, product_tv_norm,
    simulate_reference, solve, stability_experiment, tv_norm, verify_solution, BruteConjugateOptions, DiscreteMeasure,
    DualityInstance, ExhaustionScheme, Grid, Kernel, KernelMatrix, PerturbationFamily, Problem, SimulationConfig,
    SolverConfig, TransitionKernel,
};

const CONSTANT_KERNEL: &str = include_str!("../../../configs/constant_kernel.json");

type Check = Result<String, String>;

fn close(name: &str, got: f64, want: f64, tol: f64) -> Result<(), String> {
    if (got - want).abs() <= tol {
        Ok(())
    } else {
        Err(format!("{name}: got {got:e}, want {want:e} (tol {tol:e})"))
    }
}

fn e(err: bridgekit::Error) -> String {
    err.to_string()
}

fn atoms(points: &[f64], w: &[f64]) -> DiscreteMeasure {
    DiscreteMeasure::atoms(points.iter().map(|&x| vec![x]).collect(), w.to_vec()).unwrap()
}

fn measures() -> Check {
    let a = atoms(&[0.0, 1.0, 2.0], &[0.2, 0.3, 0.5]);
    close("tv(a, a)", tv_norm(&a, &a).map_err(e)?, 0.0, 0.0)?;
    close("tv(δ0, δ1)", tv_norm(&atoms(&[0.0], &[1.0]), &atoms(&[1.0], &[1.0])).map_err(e)?, 2.0, 0.0)?;
    let b = atoms(&[0.0, 1.0, 2.0], &[0.1, 0.6, 0.3]);
    let p = atoms(&[0.0, 1.0, 2.0], &[0.25, 0.25, 0.5]);
    close("product tv, equal pairs", product_tv_norm(&a, &b, &a, &b).map_err(e)?, 0.0, 0.0)?;
    close("product tv, shared factor", product_tv_norm(&p, &a, &p, &b).map_err(e)?, tv_norm(&a, &b).map_err(e)?, 1e-15)?;
    let g = Grid::uniform_1d(0.0, 9.0, 10).map_err(e)?;
    let r = DiscreteMeasure::uniform(&g).map_err(e)?.restrict(&[0, 1, 2, 3, 4]).map_err(e)?;
    for i in 0..5 {
        close("restricted uniform", r.weights()[i], 0.2, 1e-15)?;
    }
    let eps = 0.3;
    close("BL(δ0, δε)", bounded_lipschitz_distance(&atoms(&[0.0], &[1.0]), &atoms(&[eps], &[1.0])).map_err(e)?, eps, 1e-12)?;
    Ok("TV, product TV, restriction, bounded-Lipschitz".into())
}

fn kernels() -> Check {
    let pts = vec![vec![0.0], vec![1.0]];
    let q = Kernel::constant(3.0).as_matrix(&pts, &pts).map_err(e)?;
    for i in 0..2 {
        for j in 0..2 {
            close("constant kernel entry", q.get(i, j), 3.0, 1e-15)?;
        }
    }
    let b = q.bounds();
    close("constant m_q", b.m_q, 3.0, 1e-15)?;
    close("constant M_q", b.big_m_q, 3.0, 1e-15)?;
    let b = KernelMatrix::from_values(&[vec![2.0, 1.0], vec![1.0, 2.0]]).map_err(e)?.bounds();
    close("matrix m_q", b.m_q, 1.0, 1e-15)?;
    close("matrix M_q", b.big_m_q, 2.0, 1e-15)?;
    let heat = Kernel::heat(1.0, 0.7);
    let shift = heat.evaluate(&[0.4], &[-0.1]).map_err(e)? - heat.evaluate(&[1.4], &[0.9]).map_err(e)?;
    close("heat kernel shift", shift, 0.0, 1e-15)?;
    Ok("constant, matrix and heat kernels".into())
}

fn solver() -> Check {
    let cfg = SolverConfig::default();
    let pts = vec![vec![0.0], vec![1.0]];
    let mu = atoms(&[0.0, 1.0], &[0.5, 0.5]);
    let q = Kernel::constant(1.0).as_matrix(&pts, &pts).map_err(e)?;
    let sol = solve(&q, &mu, &mu, &cfg).map_err(e)?;
    for i in 0..2 {
        close("ν₁", sol.nu1.weights()[i], 0.5, 1e-12)?;
        close("ν₂", sol.nu2.weights()[i], 0.5, 1e-12)?;
        close("u₁", sol.u1[i], 0.0, 1e-12)?;
    }
    let brute = brute_force_solve(&q, &mu, &mu).map_err(e)?;
    close("brute ν₁", tv_norm(&brute.nu1, &sol.nu1).map_err(e)?, 0.0, 1e-12)?;

    let kappa = 5.0;
    let qk = Kernel::constant(kappa).as_matrix(&pts, &pts).map_err(e)?;
    let s = solve(&qk, &mu, &mu, &cfg).map_err(e)?;
    for u in s.u1.iter().chain(&s.u2) {
        close("u ≡ ½ log κ", *u, 0.5 * kappa.ln(), 1e-12)?;
    }
    let (u1, _) = potentials(&qk, &s.nu1, &s.nu2).map_err(e)?;
    close("potential log(κc)", u1[0], (kappa * s.nu2.total_mass()).ln(), 1e-12)?;
    let rep = verify_solution(&qk, &mu, &mu, &s).map_err(e)?;
    close("exact residual", rep.max_residual(), 0.0, 1e-14)?;
    let mut bad = s.clone();
    bad.nu1 = bad.nu1.scaled(2.0);
    let rep = verify_solution(&qk, &mu, &mu, &bad).map_err(e)?;
    if !(rep.gauge_gap > 0.0 || rep.mass_bound_violation > 0.0) {
        return Err("doubled ν₁ was not flagged".into());
    }

    let (x, y) = normalize_pair(&atoms(&[0.0], &[4.0]), &atoms(&[0.0], &[1.0])).map_err(e)?;
    close("normalised masses", x.total_mass(), 2.0, 1e-15)?;
    close("normalised masses", y.total_mass(), 2.0, 1e-15)?;
    Ok("constant-kernel solutions, potentials, verification, gauge".into())
}

fn stability() -> Check {
    let cfg = SolverConfig::default();
    let g = Grid::uniform_1d(0.0, 1.0, 16).map_err(e)?;
    let u = DiscreteMeasure::uniform(&g).map_err(e)?;
    let q = Kernel::heat(1.0, 1.0).as_matrix_on(&g, &g).map_err(e)?;
    let base = Problem::new(q.clone(), u.clone(), u.clone()).map_err(e)?;
    let fam = PerturbationFamily::new("constant", base.clone(), vec![base.clone(), base], vec![0.0, 0.0]).map_err(e)?;
    let rep = stability_experiment(&fam, &cfg).map_err(e)?;
    for l in &rep.levels {
        close("unperturbed distance", l.solution_delta, 0.0, 1e-9)?;
    }
    let windows: Vec<Vec<usize>> = [8usize, 12, 16].iter().map(|&n| (0..n).collect()).collect();
    let scheme = ExhaustionScheme::new(windows, &u, &u).map_err(e)?;
    let (_, ex) = exhaustion_solve(&q, &u, &u, &scheme, &cfg, &[]).map_err(e)?;
    let last = ex.levels.last().ok_or("no exhaustion levels")?;
    close("final window distance", last.bl_distance, 0.0, 1e-9)?;
    Ok("unperturbed family, exact final window".into())
}

fn paths() -> Check {
    let g = Grid::uniform_1d(-4.0, 4.0, 81).map_err(e)?;
    let cfg = SimulationConfig { n_paths: 1, dt: 0.01, seed: 7, ..SimulationConfig::default() };
    let p0 = atoms(&[0.0], &[1.0]);
    let t = TransitionKernel::brownian(1.0, 0.0);
    let a = simulate_reference(&t, &p0, Some(&g), &cfg).map_err(e)?;
    let b = simulate_reference(&t, &p0, Some(&g), &cfg).map_err(e)?;
    if a.states.iter().zip(&b.states).any(|(x, y)| x.to_bits() != y.to_bits()) {
        return Err("single-path rerun differs".into());
    }
    Ok("single-path determinism".into())
}

fn duality() -> Check {
    let g = Grid::uniform_1d(-1.0, 1.0, 4).map_err(e)?;
    let p0 = DiscreteMeasure::on_grid(&g, vec![0.1, 0.4, 0.3, 0.2]).map_err(e)?.normalized().map_err(e)?;
    let p1 = DiscreteMeasure::on_grid(&g, vec![0.3, 0.2, 0.2, 0.3]).map_err(e)?.normalized().map_err(e)?;
    let q = Kernel::heat(1.0, 0.8).as_matrix_on(&g, &g).map_err(e)?;
    let d = DualityInstance::new(q, p0, p1, &SolverConfig::default()).map_err(e)?;
    let ones = vec![1.0; 4];
    for eps in [1e-2, 1e-3] {
        close("D(ψ ≡ 1)", d.gateaux_check(&ones, eps).map_err(e)?.central, 1.0, 1e-9)?;
    }
    let f0 = d.dual_potential();
    let c = 0.37;
    let shifted: Vec<f64> = f0.iter().map(|v| v + c).collect();
    close("conjugate shift", d.v_star(&shifted).map_err(e)? - d.v_star(&f0).map_err(e)?, c, 1e-12)?;
    let brute = d.v_star_brute(&f0, &BruteConjugateOptions::default()).map_err(e)?;
    close("brute conjugate", brute.value, d.v_star(&f0).map_err(e)?, 1e-6)?;
    Ok("constant test function, conjugate shift, brute conjugate".into())
}

fn constant_config() -> Check {
    let cfg = crate::config::parse_config(CONSTANT_KERNEL.as_bytes()).map_err(|e| e.to_string())?;
    let mut p = crate::config::Problem::from_config(cfg, Default::default()).map_err(|e| e.to_string())?;
    let q = p.kernel_matrix().map_err(|e| e.to_string())?;
    let kappa = q.get(0, 0);
    let sol = solve(&q, &p.mu1, &p.mu2, &p.config.solver).map_err(e)?;
    for u in sol.u1.iter().chain(&sol.u2) {
        close("u ≡ ½ log κ", *u, 0.5 * kappa.ln(), 1e-12)?;
    }
    Ok(format!("bundled constant-kernel config, κ = {kappa}"))
}

/// Named checks in a fixed order.
pub fn checks() -> Vec<(&'static str, fn() -> Check)> {
    vec![
        ("measures", measures as fn() -> Check),
        ("kernels", kernels),
        ("solver", solver),
        ("stability", stability),
        ("paths", paths),
        ("duality", duality),
        ("constant_kernel_config", constant_config),
    ]
}
