mod common;

use approx::assert_abs_diff_eq;
use fdx_core::grid::{build_grid, gradient, hardy_ratio, weighted_inner, DomainKind, Field};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn unit_measures() {
    let g = build_grid(DomainKind::Interval, 1, 401, 1.0).unwrap();
    let one = Field::constant(&g, 1.0);
    assert_abs_diff_eq!(weighted_inner(&one, &one, &one, 0.0).unwrap(), 1.0, epsilon = 1e-12);

    for n in [101, 201] {
        let b = build_grid(DomainKind::RadialBall, 3, n, 1.0).unwrap();
        let one = Field::constant(&b, 1.0);
        let m = weighted_inner(&one, &one, &one, 0.0).unwrap();
        let h = 1.0 / (n - 1) as f64;
        assert!((m - 1.0 / 3.0).abs() <= h * h, "n = {n}: {m}");
    }
}

#[test]
fn affine_quadrature_exact_on_uniform_grids() {
    for n in [16, 33, 401] {
        let g = build_grid(DomainKind::Interval, 1, n, 1.0).unwrap();
        let f = Field::from_fn(&g, |x| 3.0 * x - 0.25);
        let one = Field::constant(&g, 1.0);
        assert_abs_diff_eq!(weighted_inner(&f, &one, &one, 0.0).unwrap(), 1.25, epsilon = 1e-12);
    }
}

#[test]
fn graded_spacing_decreases_monotonically() {
    let g = build_grid(DomainKind::Interval, 1, 401, 2.0).unwrap();
    let dx: Vec<f64> = g.x().windows(2).map(|w| w[1] - w[0]).collect();
    assert!(dx.windows(2).all(|w| w[1] < w[0]));
    assert!(dx[0] / dx[dx.len() - 1] > 100.0);
}

#[test]
fn eigenfields_orthogonal_in_weighted_inner() {
    let p = common::pipeline();
    let a = p.decomp.phi_field(1);
    let b = p.decomp.phi_field(2);
    let ip = weighted_inner(&a, &b, p.state.v(), 3.0).unwrap();
    assert!(ip.abs() <= 1e-10, "{ip}");
}

#[test]
fn gradient_examples() {
    let g = build_grid(DomainKind::Interval, 1, 401, 1.0).unwrap();
    let d = gradient(&Field::from_fn(&g, |x| x));
    assert!(d.values().iter().all(|v| (v - 1.0).abs() <= 1e-12));

    let d = gradient(&Field::from_fn(&g, |x| x * x));
    for (i, x) in g.x().iter().enumerate().skip(1).take(g.len() - 2) {
        assert_abs_diff_eq!(d.values()[i], 2.0 * x, epsilon = 1e-12);
    }

    let pi = std::f64::consts::PI;
    let d = gradient(&Field::from_fn(&g, |x| (pi * x).sin()));
    let err = g
        .x()
        .iter()
        .zip(d.values())
        .map(|(x, v)| (v - pi * (pi * x).cos()).abs())
        .fold(0.0_f64, f64::max);
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn hardy_ratio_examples() {
    let coarse = common::interval_state(401);
    let fine = common::interval_state(801);
    let g = coarse.grid().clone();
    assert!(hardy_ratio(&Field::zeros(&g), coarse.v(), 2.0).is_err());

    let r = |s: &fdx_core::stationary::StationaryState, f: &dyn Fn(f64) -> f64| {
        hardy_ratio(&Field::from_fn(s.grid(), f), s.v(), 2.0).unwrap()
    };
    let (a, b) = (r(&coarse, &|_| 1.0), r(&fine, &|_| 1.0));
    assert!(a.is_finite() && (a - b).abs() <= 0.05 * a, "{a} {b}");
    let spike = |x: f64| (1.0 - x).powf(0.6);
    let (a, b) = (r(&coarse, &spike), r(&fine, &spike));
    assert!((a - b).abs() <= 0.1 * a, "{a} {b}");
}

#[test]
fn hardy_ratio_grid_independent_on_smooth_fields() {
    let coarse = common::interval_state(401);
    let fine = common::interval_state(801);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let c: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = |s: &fdx_core::stationary::StationaryState| {
            let h = Field::from_fn(s.grid(), |x| {
                c.iter()
                    .enumerate()
                    .map(|(j, a)| a * (j as f64 * std::f64::consts::PI * x).cos())
                    .sum()
            });
            hardy_ratio(&h, s.v(), 2.0).unwrap()
        };
        let (a, b) = (f(&coarse), f(&fine));
        assert!((a - b).abs() <= 0.1 * a, "{c:?}: {a} {b}");
    }
}

proptest! {
    #[test]
    fn weighted_inner_exactly_symmetric(
        u in proptest::collection::vec(-1.0..1.0_f64, 32),
        v in proptest::collection::vec(-1.0..1.0_f64, 32),
        sigma in 0.0..4.0_f64,
    ) {
        let g = build_grid(DomainKind::Interval, 1, 32, 1.5).unwrap();
        let w = Field::from_fn(&g, |x| x * (1.0 - x));
        let u = Field::new(g.clone(), u).unwrap();
        let v = Field::new(g.clone(), v).unwrap();
        let a = weighted_inner(&u, &v, &w, sigma).unwrap();
        let b = weighted_inner(&v, &u, &w, sigma).unwrap();
        prop_assert_eq!(a, b);
    }
}
