use bridgekit::{
    bounded_lipschitz_distance, product_tv_norm, tv_norm, DiscreteMeasure, Error, Grid,
};
use minilp::{ComparisonOp, OptimizationDirection, Problem};
use proptest::prelude::*;

fn line(weights: Vec<f64>, vol: f64) -> DiscreteMeasure {
    let pts = (0..weights.len()).map(|i| vec![i as f64 * 0.25]).collect();
    DiscreteMeasure::new(pts, weights, vol).unwrap()
}

fn weights(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0..1.0f64, n)
}

/// sup over φ of ∫φ d(a-b) with |φ| ≤ 1 and |φ_i - φ_j| ≤ ||x_i - x_j||₁, by a generic LP solver.
fn bl_lp(points: &[Vec<f64>], diff: &[f64]) -> f64 {
    let mut lp = Problem::new(OptimizationDirection::Maximize);
    let vars: Vec<_> = diff.iter().map(|&c| lp.add_var(c, (-1.0, 1.0))).collect();
    for i in 0..points.len() {
        for j in 0..points.len() {
            if i != j {
                let d: f64 = points[i].iter().zip(&points[j]).map(|(a, b)| (a - b).abs()).sum();
                lp.add_constraint(&[(vars[i], 1.0), (vars[j], -1.0)], ComparisonOp::Le, d);
            }
        }
    }
    lp.solve().unwrap().objective()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tv_is_a_metric(a in weights(7), b in weights(7), c in weights(7)) {
        let (a, b, c) = (line(a, 1.0), line(b, 1.0), line(c, 1.0));
        let ab = tv_norm(&a, &b).unwrap();
        prop_assert!((ab - tv_norm(&b, &a).unwrap()).abs() < 1e-15);
        prop_assert!(ab <= tv_norm(&a, &c).unwrap() + tv_norm(&c, &b).unwrap() + 1e-14);
        prop_assert_eq!(tv_norm(&a, &a).unwrap(), 0.0);
        if a.weights() != b.weights() {
            prop_assert!(ab > 0.0);
        }
    }

    #[test]
    fn tv_matches_sign_enumeration(a in weights(10), b in weights(10)) {
        let (ma, mb) = (line(a.clone(), 1.0), line(b.clone(), 1.0));
        let mut best = f64::NEG_INFINITY;
        for mask in 0u32..1024 {
            let v: f64 = (0..10)
                .map(|i| if mask >> i & 1 == 1 { a[i] - b[i] } else { b[i] - a[i] })
                .sum();
            best = best.max(v);
        }
        prop_assert!((tv_norm(&ma, &mb).unwrap() - best).abs() < 1e-12);
    }

    #[test]
    fn product_tv_is_bounded_by_factor_distances(
        a1 in weights(4), a2 in weights(5), b1 in weights(4), b2 in weights(5)
    ) {
        let (a1, a2, b1, b2) = (line(a1, 1.0), line(a2, 1.0), line(b1, 1.0), line(b2, 1.0));
        let lhs = product_tv_norm(&a1, &a2, &b1, &b2).unwrap();
        let rhs = tv_norm(&a1, &b1).unwrap() * a2.total_mass()
            + b1.total_mass() * tv_norm(&a2, &b2).unwrap();
        prop_assert!(lhs <= rhs + 1e-13);
    }

    #[test]
    fn product_tv_matches_double_sum(
        a1 in weights(5), a2 in weights(5), b1 in weights(5), b2 in weights(5)
    ) {
        let direct: f64 = (0..5)
            .flat_map(|i| (0..5).map(move |j| (i, j)))
            .map(|(i, j)| (a1[i] * a2[j] - b1[i] * b2[j]).abs())
            .sum();
        let got = product_tv_norm(&line(a1, 1.0), &line(a2, 1.0), &line(b1, 1.0), &line(b2, 1.0)).unwrap();
        prop_assert!((got - direct).abs() < 1e-13);
    }

    #[test]
    fn product_with_shared_probability_factor_reduces(a in weights(6), b in weights(6), c in weights(4)) {
        prop_assume!(c.iter().sum::<f64>() > 1e-3);
        let p = line(c, 1.0).normalized().unwrap();
        let (a, b) = (line(a, 1.0), line(b, 1.0));
        let got = product_tv_norm(&p, &a, &p, &b).unwrap();
        prop_assert!((got - tv_norm(&a, &b).unwrap()).abs() < 1e-13);
    }

    #[test]
    fn restrict_is_idempotent(w in weights(12), lo in 0usize..6, len in 1usize..6) {
        let m = line(w, 0.5);
        let window: Vec<usize> = (lo..lo + len).collect();
        prop_assume!(m.mass_on(&window) > 0.0);
        let once = m.restrict(&window).unwrap();
        let twice = once.restrict(&window).unwrap();
        prop_assert_eq!(once.weights(), twice.weights());
        prop_assert!(once.is_probability());
    }

    #[test]
    fn bounded_lipschitz_is_below_tv(a in weights(9), b in weights(9)) {
        let (a, b) = (line(a, 1.0), line(b, 1.0));
        prop_assert!(bounded_lipschitz_distance(&a, &b).unwrap() <= tv_norm(&a, &b).unwrap() + 1e-12);
    }

    #[test]
    fn bounded_lipschitz_matches_lp(
        a in weights(4), b in weights(4),
        coords in prop::collection::vec(-1.5..1.5f64, 8)
    ) {
        let pts: Vec<Vec<f64>> = coords.chunks(2).map(|c| c.to_vec()).collect();
        let ma = DiscreteMeasure::atoms(pts.clone(), a.clone()).unwrap();
        let mb = DiscreteMeasure::atoms(pts.clone(), b.clone()).unwrap();
        let diff: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let oracle = bl_lp(&pts, &diff);
        let got = bounded_lipschitz_distance(&ma, &mb).unwrap();
        prop_assert!((got - oracle).abs() < 1e-9, "flow {} lp {}", got, oracle);
    }
}

#[test]
fn disjoint_unit_atoms_are_at_distance_two() {
    let a = DiscreteMeasure::atoms(vec![vec![0.0]], vec![1.0]).unwrap();
    let b = DiscreteMeasure::atoms(vec![vec![1.0]], vec![1.0]).unwrap();
    assert_eq!(tv_norm(&a, &b).unwrap(), 2.0);
}

#[test]
fn mismatched_cell_volumes_are_rejected() {
    let a = line(vec![0.5, 0.5], 1.0);
    let b = line(vec![0.5, 0.5], 0.5);
    assert!(matches!(tv_norm(&a, &b), Err(Error::IncompatibleQuadrature(..))));
}

#[test]
fn restriction_examples() {
    let g = Grid::uniform_1d(0.0, 9.0, 10).unwrap();
    let u = DiscreteMeasure::uniform(&g).unwrap();
    let r = u.restrict(&[0, 1, 2, 3, 4]).unwrap();
    for i in 0..5 {
        assert!((r.weights()[i] - 0.2).abs() < 1e-15);
    }
    let m = line(vec![0.1, 0.2, 0.3, 0.4], 1.0);
    let r = m.restrict(&[2, 3]).unwrap();
    assert!((r.weights()[2] - 3.0 / 7.0).abs() < 1e-15);
    assert!((r.weights()[3] - 4.0 / 7.0).abs() < 1e-15);
    assert!(matches!(m.with_weights(vec![0.0, 0.0, 0.5, 0.5]).unwrap().restrict(&[0, 1]), Err(Error::EmptyRestriction)));
}

#[test]
fn bounded_lipschitz_of_shifted_atom() {
    let a = DiscreteMeasure::atoms(vec![vec![0.0]], vec![1.0]).unwrap();
    for eps in [1e-3, 0.5, 1.9] {
        let b = DiscreteMeasure::atoms(vec![vec![eps]], vec![1.0]).unwrap();
        assert!((bounded_lipschitz_distance(&a, &b).unwrap() - eps).abs() < 1e-12);
    }
    let far = DiscreteMeasure::atoms(vec![vec![3.0]], vec![1.0]).unwrap();
    assert!((bounded_lipschitz_distance(&a, &far).unwrap() - 2.0).abs() < 1e-12);
    assert_eq!(bounded_lipschitz_distance(&a, &a).unwrap(), 0.0);
}

#[test]
fn json_round_trip() {
    let m = line(vec![0.1, 0.2, 0.7], 0.25);
    let s = serde_json::to_string(&m).unwrap();
    assert!(s.contains("\"points\"") && s.contains("\"cell_volume\""));
    let back: DiscreteMeasure = serde_json::from_str(&s).unwrap();
    assert_eq!(back.weights(), m.weights());
    assert_eq!(back.cell_volume(), m.cell_volume());
}
