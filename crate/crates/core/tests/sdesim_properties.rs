mod common;

use bridgekit::{
    build_bridge, control_cost_report, empirical_marginal_check, simulate_bridge, simulate_reference,
    BridgeModel, ControlSpec, DiscreteMeasure, Grid, SimulationConfig, SolverConfig, TransitionKernel,
};

fn model(mean1: f64) -> BridgeModel {
    let g = Grid::uniform_1d(-6.0, 6.0, 301).unwrap();
    let p0 = common::gaussian_on(&g, 0.0, 0.5);
    let p1 = common::gaussian_on(&g, mean1, 0.5);
    build_bridge(TransitionKernel::brownian(1.0, 0.0), p0, p1, g, 1000, &SolverConfig::default()).unwrap()
}

fn moments(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

fn cfg(n_paths: usize, dt: f64) -> SimulationConfig {
    SimulationConfig { n_paths, dt, seed: 11, ..SimulationConfig::default() }
}

#[test]
fn reruns_are_bitwise_identical() {
    let m = model(0.0);
    for n in [1, 500] {
        let c = SimulationConfig { record_stride: 100, ..cfg(n, 1e-2) };
        let a = simulate_bridge(&m, &c, &ControlSpec::default()).unwrap();
        let b = simulate_bridge(&m, &c, &ControlSpec::default()).unwrap();
        assert_eq!(a, b);
        let other = simulate_bridge(&m, &SimulationConfig { seed: 12, ..c }, &ControlSpec::default()).unwrap();
        assert_ne!(a.final_states(), other.final_states());
    }
}

#[test]
fn brownian_motion_from_the_origin() {
    let delta = DiscreteMeasure::atoms(vec![vec![0.0]], vec![1.0]).unwrap();
    let n = 40_000;
    let e = simulate_reference(&TransitionKernel::brownian(1.0, 0.0), &delta, None, &cfg(n, 1e-2)).unwrap();
    assert!(e.initial_states().iter().all(|&x| x == 0.0));
    let (m, v) = moments(e.final_states());
    let se = 1.0 / (n as f64).sqrt();
    assert!(m.abs() < 4.0 * se, "{m}");
    assert!((v - 1.0).abs() < 4.0 * 2f64.sqrt() * se, "{v}");
    assert!(e.control_cost.is_empty());
}

#[test]
fn constant_drift_moves_the_mean() {
    let delta = DiscreteMeasure::atoms(vec![vec![0.0]], vec![1.0]).unwrap();
    let n = 40_000;
    let e = simulate_reference(&TransitionKernel::brownian(0.25, 1.5), &delta, None, &cfg(n, 1e-2)).unwrap();
    let (m, v) = moments(e.final_states());
    assert!((m - 1.5).abs() < 4.0 * 0.5 / (n as f64).sqrt(), "{m}");
    assert!((v - 0.25).abs() < 0.01);
}

#[test]
fn ou_from_its_stationary_law_stays_there() {
    let g = Grid::uniform_1d(-8.0, 8.0, 321).unwrap();
    let p = common::gaussian_on(&g, 0.0, 1.0);
    let n = 40_000;
    let ou = TransitionKernel::ornstein_uhlenbeck(1.0, 0.0, 2f64.sqrt());
    let e = simulate_reference(&ou, &p, Some(&g), &cfg(n, 1e-3)).unwrap();
    let (m0, v0) = moments(e.initial_states());
    let (m1, v1) = moments(e.final_states());
    let se = (2.0 / n as f64).sqrt();
    for (m, v) in [(m0, v0), (m1, v1)] {
        assert!(m.abs() < 4.0 / (n as f64).sqrt(), "{m}");
        // Euler bias of the stationary variance is O(Δt)
        assert!((v - 1.0).abs() < 4.0 * se + 2e-3, "{v}");
    }
}

#[test]
fn initial_histogram_matches_p0() {
    let m = model(0.0);
    let e = simulate_bridge(&m, &cfg(20_000, 1e-2), &ControlSpec::default()).unwrap();
    let chk = empirical_marginal_check(&e, 0.0, m.grid(), m.p0(), 1.0).unwrap();
    // histogram noise: about Σ √(2 p / (π n)) over cells
    let noise: f64 = m.p0().weights().iter().map(|p| (2.0 * p / (std::f64::consts::PI * 20_000.0)).sqrt()).sum();
    assert!(chk.tv < 1.5 * noise, "{} {}", chk.tv, noise);
    assert_eq!(chk.outside_fraction, 0.0);
}

#[test]
fn bridge_marginal_at_half_time_matches_the_flow() {
    let m = model(0.0);
    let n = 40_000;
    let e = simulate_bridge(&m, &SimulationConfig { record_stride: 250, ..cfg(n, 1e-3) }, &ControlSpec::default()).unwrap();
    let k = e.record_index(0.5).unwrap();
    let (mean, var) = moments(e.record(k));
    let flow = m.marginal_flow(0.5).unwrap();
    let (qm, qv) = (flow.mean()[0], flow.variance(0));
    assert!((mean - qm).abs() < 4.0 * (qv / n as f64).sqrt(), "{mean} {qm}");
    assert!((var - qv).abs() < 4.0 * qv * (2.0 / n as f64).sqrt() + 2e-3, "{var} {qv}");
}

#[test]
fn euler_bias_is_first_order() {
    // Runs share one Brownian path per sample at resolution 1e-3.
    let m = model(0.0);
    let second = |dt: f64| {
        let c = SimulationConfig { noise_refinement: (dt / 1e-3).round() as usize, ..cfg(20_000, dt) };
        let e = simulate_bridge(&m, &c, &ControlSpec::default()).unwrap();
        e.final_states().iter().map(|x| x * x).sum::<f64>() / 20_000.0
    };
    let (a, b, c) = (second(4e-3), second(2e-3), second(1e-3));
    let ratio = (a - b) / (b - c);
    assert!((1.5..2.7).contains(&ratio), "{a} {b} {c} ratio {ratio}");
}

#[test]
fn negative_controls_fail() {
    let m = model(1.0);
    let n = 20_000;
    let good = simulate_bridge(&m, &cfg(n, 1e-3), &ControlSpec::default()).unwrap();
    let wrong_target = empirical_marginal_check(&good, 1.0, m.grid(), m.p0(), 0.05).unwrap();
    assert!(!wrong_target.passed, "{wrong_target:?}");

    let doubled = simulate_bridge(&m, &cfg(n, 1e-3), &ControlSpec { scale: 2.0 }).unwrap();
    let right = empirical_marginal_check(&good, 1.0, m.grid(), m.p1(), 0.05).unwrap();
    let off = empirical_marginal_check(&doubled, 1.0, m.grid(), m.p1(), 0.05).unwrap();
    assert!(!off.passed && off.tv > right.tv, "{off:?} {right:?}");
    let (c_good, se_good) = good.cost_statistics().unwrap();
    let (c_doubled, _) = doubled.cost_statistics().unwrap();
    assert!(c_doubled > c_good + 4.0 * se_good);
    assert!(good.control_cost.iter().all(|&c| c >= 0.0));
}

#[test]
fn cost_matches_twice_the_entropy_gap() {
    let m = model(1.0);
    let e = simulate_bridge(&m, &cfg(20_000, 1e-3), &ControlSpec::default()).unwrap();
    let r = control_cost_report(&e, &m).unwrap();
    let ratio = r.half_ratio.unwrap();
    assert!((ratio - 1.0).abs() < 0.05, "{r:?}");
    assert!((r.full_ratio.unwrap() - 2.0 * ratio).abs() < 1e-12);
}

#[test]
fn stationary_bridge_needs_no_control() {
    let g = Grid::uniform_1d(-8.0, 8.0, 321).unwrap();
    let p = common::gaussian_on(&g, 0.0, 1.0);
    let ou = TransitionKernel::ornstein_uhlenbeck(1.0, 0.0, 2f64.sqrt());
    let m = build_bridge(ou, p.clone(), p, g, 100, &SolverConfig::default()).unwrap();
    let e = simulate_bridge(&m, &cfg(2_000, 1e-2), &ControlSpec::default()).unwrap();
    let r = control_cost_report(&e, &m).unwrap();
    assert!(r.mean_cost < 1e-6 && r.delta.abs() < 1e-6, "{r:?}");
}

#[test]
fn invalid_configs_are_rejected() {
    let m = model(0.0);
    for c in [cfg(0, 1e-2), cfg(10, 0.3), cfg(10, 0.0), SimulationConfig { noise_refinement: 0, ..cfg(10, 1e-2) }] {
        assert!(simulate_bridge(&m, &c, &ControlSpec::default()).is_err());
    }
    let e = simulate_bridge(&m, &cfg(10, 1e-2), &ControlSpec::default()).unwrap();
    assert!(empirical_marginal_check(&e, 0.5, m.grid(), m.p1(), 0.05).is_err());
}
