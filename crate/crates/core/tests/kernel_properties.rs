use bridgekit::{verify_chapman_kolmogorov, Error, Grid, Kernel, KernelMatrix, TransitionKernel};
use proptest::prelude::*;
use std::f64::consts::PI;

fn normal_pdf(mean: f64, var: f64, y: f64) -> f64 {
    (-(y - mean).powi(2) / (2.0 * var)).exp() / (2.0 * PI * var).sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn brownian_density_is_gaussian(
        a in 0.1..3.0f64, b in -2.0..2.0f64, t in 0.0..0.9f64, len in 0.05..1.0f64,
        x in -3.0..3.0f64, y in -3.0..3.0f64,
    ) {
        let s = t + len;
        let got = TransitionKernel::brownian(a, b).density(t, &[x], s, &[y]).unwrap();
        let want = normal_pdf(x + b * len, a * len, y);
        prop_assert!((got - want).abs() <= 1e-12 * want.max(1e-300) + 1e-300);
    }

    #[test]
    fn ou_density_matches_its_moments(
        theta in 0.1..3.0f64, mean in -1.0..1.0f64, sigma in 0.2..2.0f64,
        x in -2.0..2.0f64, y in -2.0..2.0f64, len in 0.05..1.0f64,
    ) {
        let got = TransitionKernel::ornstein_uhlenbeck(theta, mean, sigma).density(0.0, &[x], len, &[y]).unwrap();
        let e = (-theta * len).exp();
        let var = sigma * sigma * (1.0 - e * e) / (2.0 * theta);
        let want = normal_pdf(mean + (x - mean) * e, var, y);
        prop_assert!((got - want).abs() <= 1e-11 * want + 1e-300);
    }

    #[test]
    fn heat_kernel_is_shift_equivariant(a in 0.2..2.0f64, tau in 0.1..2.0f64, x in -2.0..2.0f64, y in -2.0..2.0f64, c in -3.0..3.0f64) {
        let k = Kernel::heat(a, tau);
        let d = (k.evaluate(&[x], &[y]).unwrap() - k.evaluate(&[x + c], &[y + c]).unwrap()).abs();
        prop_assert!(d < 1e-14);
    }

    #[test]
    fn materialised_kernels_are_positive_with_ordered_bounds(
        a in 0.2..2.0f64, tau in 0.1..2.0f64, n in 2usize..30, half in 0.5..5.0f64, kappa in 0.1..10.0f64,
    ) {
        let g = Grid::uniform_1d(-half, half, n).unwrap();
        let q = Kernel::heat(a, tau).as_matrix_on(&g, &g).unwrap();
        let b = q.bounds();
        prop_assert!(b.m_q > 0.0 && b.m_q <= b.big_m_q);
        for i in 0..n {
            for j in 0..n {
                let v = q.get(i, j);
                prop_assert!(v > 0.0 && v >= b.m_q * (1.0 - 1e-14) && v <= b.big_m_q * (1.0 + 1e-14));
            }
        }
        // scaling multiplies both bounds exactly
        let s = Kernel::heat(a, tau).scaled(kappa).as_matrix_on(&g, &g).unwrap().bounds();
        prop_assert!((s.m_q / b.m_q - kappa).abs() < 1e-12 * kappa);
        prop_assert!((s.big_m_q / b.big_m_q - kappa).abs() < 1e-12 * kappa);
        prop_assert!(q.is_symmetric(0.0));
    }
}

#[test]
fn heat_kernel_at_the_origin() {
    let v = Kernel::heat(1.0, 1.0).evaluate(&[0.0], &[0.0]).unwrap();
    assert!((v - 1.0 / (2.0 * PI).sqrt()).abs() < 1e-15);
    assert!((v - 0.39894).abs() < 1e-5);
    let v = TransitionKernel::brownian(1.0, 0.0).density(0.0, &[0.0], 1.0, &[0.0]).unwrap();
    assert!((v - 1.0 / (2.0 * PI).sqrt()).abs() < 1e-15);
}

#[test]
fn heat_kernel_bounds_on_an_interval() {
    let g = Grid::uniform_1d(-3.0, 3.0, 61).unwrap();
    let b = Kernel::heat(1.0, 1.0).as_matrix_on(&g, &g).unwrap().bounds();
    assert!((b.big_m_q - 1.0 / (2.0 * PI).sqrt()).abs() < 1e-15);
    assert!((b.m_q - normal_pdf(0.0, 1.0, 6.0)).abs() < 1e-20);
}

#[test]
fn matrix_kernels() {
    let q = KernelMatrix::from_values(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
    let b = q.bounds();
    assert_eq!((b.m_q, b.big_m_q), (1.0, 2.0));
    let c = Kernel::constant(2.5).as_matrix_on(&Grid::uniform_1d(0.0, 1.0, 2).unwrap(), &Grid::uniform_1d(0.0, 1.0, 3).unwrap()).unwrap();
    assert_eq!(c.to_rows(), vec![vec![2.5; 3]; 2]);
    assert!(KernelMatrix::from_values(&[vec![1.0, 0.0]]).is_err());
    assert!(KernelMatrix::from_values(&[vec![1.0, -1.0]]).is_err());
    assert!(Kernel::constant(0.0).as_matrix_on(&Grid::uniform_1d(0.0, 1.0, 2).unwrap(), &Grid::uniform_1d(0.0, 1.0, 2).unwrap()).is_err());
}

#[test]
fn product_kernels_have_rank_one() {
    let k: Kernel = serde_json::from_str(
        r#"{"kind":"product","f":{"kind":"exp_linear","scale":1.5,"slope":0.4},
            "g":{"kind":"gaussian","scale":2.0,"centre":[0.1],"width":0.8}}"#,
    )
    .unwrap();
    let g = Grid::uniform_1d(-2.0, 2.0, 9).unwrap();
    let q = k.as_matrix_on(&g, &g).unwrap();
    for (i, j) in [(0, 1), (2, 7), (3, 8)] {
        for (k2, l) in [(4, 5), (1, 6)] {
            let minor = q.get(i, k2) * q.get(j, l) - q.get(i, l) * q.get(j, k2);
            assert!(minor.abs() < 1e-12 * q.bounds().big_m_q.powi(2));
        }
    }
}

#[test]
fn chapman_kolmogorov() {
    let wide = Grid::uniform_1d(-12.0, 12.0, 481).unwrap();
    let bm = TransitionKernel::brownian(1.0, 0.3);
    let r = verify_chapman_kolmogorov(&bm, &wide, 0.0, 0.4, 1.0).unwrap();
    assert!(r.interior_only && !r.flagged && r.max_residual < 1e-6, "{r:?}");
    let ou = TransitionKernel::ornstein_uhlenbeck(1.0, 0.5, 1.0);
    assert!(!verify_chapman_kolmogorov(&ou, &wide, 0.0, 0.3, 1.0).unwrap().flagged);
    // a domain narrower than the spread loses mass and breaks the identity
    let narrow = Grid::uniform_1d(-1.0, 1.0, 41).unwrap();
    let r = verify_chapman_kolmogorov(&bm, &narrow, 0.0, 0.5, 1.0).unwrap();
    assert!(r.flagged && !r.interior_only && r.max_tail_mass > 0.1);
    let single = Grid::uniform_1d(0.0, 0.0, 1).unwrap();
    assert!(verify_chapman_kolmogorov(&bm, &single, 0.0, 0.5, 1.0).is_ok());
}

#[test]
fn degenerate_horizons_are_rejected() {
    let bm = TransitionKernel::brownian(1.0, 0.0);
    assert!(matches!(bm.density(0.5, &[0.0], 0.5, &[0.0]), Err(Error::DegenerateHorizon { .. })));
    assert!(matches!(bm.kernel(0.7, 0.2), Err(Error::DegenerateHorizon { .. })));
    assert!(verify_chapman_kolmogorov(&bm, &Grid::uniform_1d(-1.0, 1.0, 5).unwrap(), 0.0, 1.0, 0.5).is_err());
}
