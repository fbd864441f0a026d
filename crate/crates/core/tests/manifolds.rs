mod common;

use fdx_core::grid::Field;
use fdx_core::manifolds::{trinorm, ManifoldSettings, ManifoldSolver};
use fdx_core::nonlinearity::TruncationConfig;
use proptest::prelude::*;

const TOL: f64 = 1e-8;

/// Solver at cut `k` with a coarse step: every property below is a
/// statement about the discrete time-one map, whatever its step.
fn solver(k: usize, window_j: usize) -> ManifoldSolver {
    let p = common::pipeline();
    let settings = ManifoldSettings {
        window_j,
        window_i: 10,
        tol: TOL,
        max_sweeps: 200,
        dt: 1.0 / 64.0,
    };
    ManifoldSolver::new(
        &p.decomp,
        p.gap_at(k).unwrap(),
        TruncationConfig::new(0.05, 0.05).unwrap(),
        settings,
    )
    .unwrap()
}

fn modal(c: &[f64]) -> Field {
    let d = &common::pipeline().decomp;
    Field::new(d.grid().clone(), d.synthesize(c)).unwrap()
}

#[test]
fn trinorm_examples() {
    let d = &common::pipeline().decomp;
    assert!((trinorm(&d.phi_field(1), d, 1) - 1.0).abs() <= 1e-10);
    let h = d.phi_field(1).add(&d.phi_field(2)).unwrap();
    assert!((trinorm(&h, d, 1) - 1.0).abs() <= 1e-10);
    assert!((trinorm(&h, d, 2) - 2f64.sqrt()).abs() <= 1e-10);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]
    #[test]
    fn trinorm_is_equivalent(c in prop::collection::vec(-1.0f64..1.0, 8), k in 1usize..5) {
        let d = &common::pipeline().decomp;
        let h = modal(&c);
        let t = trinorm(&h, d, k);
        let n = d.norm(h.values());
        prop_assert!(t <= n * (1.0 + 1e-12));
        prop_assert!(n <= 2f64.sqrt() * t * (1.0 + 1e-12));
    }
}

#[test]
fn zero_center_gives_zero_orbit() {
    let mut s = solver(2, 6);
    let seq = s.iterate_j(&[0.0, 0.0]).unwrap();
    assert!(seq.slices.iter().all(|f| f.norm_inf() == 0.0));
    assert_eq!(s.theta(&[0.0, 0.0]).unwrap().norm_inf(), 0.0);
    assert_eq!(s.invariance_check(&[vec![0.0, 0.0]], 1.0).unwrap(), 0.0);
    assert!(s.iterate_j(&[0.0]).is_err());
}

#[test]
fn center_fixed_point_bounds() {
    let mut s = solver(2, 6);
    let kc = s.gap().k_contr;
    for coords in [[0.02, 0.0], [0.0, 0.02], [-0.01, 0.015]] {
        let seq = s.iterate_j(&coords).unwrap();
        let hc = s.trinorm(&modal(&coords).into_values());
        assert!(s.sequence_norm(&seq) <= hc + TOL);
        assert!(seq.contraction <= kc + 0.05, "contraction {}", seq.contraction);
        let z = s.center_point(&coords).unwrap();
        let back = s.center_coords(z.point.values());
        for (a, b) in back.iter().zip(&coords) {
            assert!((a - b).abs() <= 1e-10);
        }
    }
}

#[test]
fn theta_is_window_robust() {
    let coords = [0.015, -0.01];
    let a = solver(2, 6).theta(&coords).unwrap();
    let b = solver(2, 11).theta(&coords).unwrap();
    let d = &common::pipeline().decomp;
    assert!(trinorm(&a.sub(&b).unwrap(), d, 2) <= 10.0 * TOL);
}

#[test]
fn stable_fixed_point() {
    let mut s = solver(1, 6);
    let kc = s.gap().k_contr;
    let g = modal(&[0.01, 0.01, 0.005]);
    let zero = s.iterate_i(&g, &Field::zeros(&g.grid().clone())).unwrap();
    assert!(zero.slices.iter().all(|f| f.norm_inf() == 0.0));

    let g_s = modal(&[0.0, 0.004, -0.003, 0.002]);
    let seq = s.iterate_i(&g, &g_s).unwrap();
    assert!(s.sequence_norm(&seq) <= s.trinorm(g_s.values()) + TOL);
    assert!(seq.contraction <= kc + 0.05, "contraction {}", seq.contraction);
    // the zero slice keeps the prescribed stable part
    let st = s.stable_projection(seq.get(0).values());
    let d: Vec<f64> = st.iter().zip(g_s.values()).map(|(a, b)| a - b).collect();
    assert!(s.trinorm(&d) <= 10.0 * TOL);

    assert!(s.iterate_i(&g, &g).is_err());
}

#[test]
fn leaf_members_track_the_base_orbit() {
    let mut s = solver(1, 6);
    let g = modal(&[0.01, 0.01, 0.005]);
    let g_s = modal(&[0.0, 0.004, -0.003, 0.002]);
    let leaf = s.leaf(&g).unwrap();
    let member = s.member(&leaf, &g_s).unwrap();
    let dist = s.leaf_distance(&g, &member).unwrap();
    let ps = s.stable_projection(g.sub(&member).unwrap().values());
    let sup = dist.iter().fold(0.0_f64, |m, v| m.max(*v));
    assert!(sup <= s.trinorm(&ps) + TOL, "sup {sup}");
    // non-increasing beyond k = 5 up to rounding: a center-mode error of a few
    // ulps grows like e^{−λ_1 k} along the orbit and is weighted by Λ_−^{−k}
    let growth = (-s.gap().lambda_1).exp();
    for k in 6..dist.len() {
        let amp = s.weight_i(k as i64) * growth.powi(k as i32);
        let floor = 1024.0 * f64::EPSILON * amp * s.trinorm(g.values());
        assert!(dist[k] <= dist[k - 1] + floor, "k = {k}: {} > {}", dist[k], dist[k - 1]);
    }
}

#[test]
fn psi_is_continuous_in_g() {
    let mut s = solver(1, 6);
    let g = modal(&[0.01, 0.01, 0.005]);
    let q_s = modal(&[0.0, 0.003, 0.002]);
    let base = s.psi(&g, &q_s).unwrap();
    for j in 1..=3 {
        let mut c = vec![0.0; 4];
        c[j] = 1e-4;
        let gi = g.add(&modal(&c)).unwrap();
        let other = s.psi(&gi, &q_s).unwrap();
        assert!(s.trinorm(other.sub(&base).unwrap().values()) <= 1e-3);
    }
}

#[test]
fn foliation_intersection() {
    let mut s = solver(1, 6);
    let zero = s.foliation_intersect(&Field::zeros(common::pipeline().decomp.grid())).unwrap();
    assert_eq!(zero.point.point.norm_inf(), 0.0);

    // with K = 1, θ vanishes and W_c is the φ_1 line
    let z = s.center_point(&[0.02]).unwrap();
    assert!(z.stable.norm_inf() <= TOL);
    let hit = s.foliation_intersect(&z.point).unwrap();
    assert!(s.trinorm(hit.point.point.sub(&z.point).unwrap().values()) <= 10.0 * TOL);

    let g = modal(&[0.01, 0.01, 0.005]);
    let hit = s.foliation_intersect(&g).unwrap();
    assert!(hit.lip_chi < 1.0);
    let th = s.theta(&hit.point.center).unwrap();
    assert!(s.trinorm(th.sub(&hit.point.stable).unwrap().values()) <= 10.0 * TOL);
}
