mod common;

use std::sync::Arc;

use approx::assert_relative_eq;
use fdx_core::grid::Field;
use fdx_core::operator::{assemble, eigen, gap_parameters, SpectralDecomposition};
use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn decomp(n: usize, k_max: usize) -> SpectralDecomposition {
    let st = common::interval_state(n);
    let a = Arc::new(assemble(&st).unwrap());
    eigen(&a, k_max).unwrap()
}

fn modal(d: &SpectralDecomposition, c: &[f64]) -> Field {
    Field::new(d.grid().clone(), d.synthesize(c)).unwrap()
}

fn random_coeffs(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    (0..k).map(|j| rng.random_range(-1.0..1.0) / (1.0 + j as f64)).collect()
}

#[test]
fn matches_dense_generalized_eigensolver() {
    let d = decomp(121, 12);
    let a = d.assembly();
    let (lo, hi) = a.active_range();
    let m = hi - lo + 1;
    let n = a.grid().len();
    // B^{-1/2} A B^{-1/2} restricted to the positive-mass nodes
    let mut c = DMatrix::<f64>::zeros(m, m);
    let mut e = vec![0.0; n];
    let mut out = vec![0.0; n];
    for j in 0..m {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[lo + j] = 1.0;
        a.apply_stiffness(&e, &mut out);
        for i in 0..m {
            c[(i, j)] = out[lo + i] / (a.mass()[lo + i] * a.mass()[lo + j]).sqrt();
        }
    }
    let mut ev: Vec<f64> = SymmetricEigen::new(c).eigenvalues.iter().copied().collect();
    ev.sort_by(|x, y| x.partial_cmp(y).unwrap());
    for k in 1..=12 {
        let dense = ev[k - 1] - a.shift();
        assert_relative_eq!(d.lambda(k), dense, epsilon = 1e-9, max_relative = 1e-9);
    }
}

#[test]
fn constants_are_the_first_eigenfield() {
    let p = common::pipeline();
    let a = &p.assembly;
    let one = vec![1.0; p.grid.len()];
    let mut out = vec![0.0; one.len()];
    a.apply_stiffness(&one, &mut out);
    let scale = a.edge().iter().cloned().fold(0.0, f64::max);
    assert!(out.iter().all(|v| v.abs() <= 1e-14 * scale));
    let c = Field::constant(&p.grid, 0.7);
    let lc = a.apply_l(&c).unwrap();
    for v in lc.values() {
        assert_relative_eq!(*v, (1.0 - a.p()) * 0.7, epsilon = 1e-10);
    }
    assert_relative_eq!(p.decomp.lambda(1), 1.0 - a.p(), epsilon = 1e-10);
}

#[test]
fn stiffness_form_is_exactly_symmetric() {
    let p = common::pipeline();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let u = common::sines(&p.grid, &random_coeffs(&mut rng, 6));
        let v = common::sines(&p.grid, &random_coeffs(&mut rng, 6));
        let a = &p.assembly;
        assert_eq!(
            a.stiffness_form(u.values(), v.values()),
            a.stiffness_form(v.values(), u.values())
        );
    }
}

#[test]
fn spectrum_is_ordered_and_orthonormal() {
    let d = &common::pipeline().decomp;
    let l = d.lambdas();
    assert!(l[0] < 0.0 && l[1] > 0.0);
    assert!(l.windows(2).all(|w| w[0] < w[1]));
    for i in 1..=d.k_max() {
        for j in 1..=d.k_max() {
            let g = d.inner(d.phi(i), d.phi(j));
            let e = if i == j { 1.0 } else { 0.0 };
            assert!((g - e).abs() <= 1e-8, "gram[{i}][{j}] = {g}");
        }
    }
}

#[test]
fn projections() {
    let p = common::pipeline();
    let d = &p.decomp;
    let (c, s) = d.project(1, &Field::constant(&p.grid, 2.0)).unwrap();
    assert!(s.norm_inf() <= 1e-8);
    assert!((c.norm_inf() - 2.0).abs() <= 1e-8);
    let (c, s) = d.project(1, &d.phi_field(2)).unwrap();
    assert!(c.norm_inf() <= 1e-8);
    assert!(s.sub(&d.phi_field(2)).unwrap().norm_inf() <= 1e-10);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for k in 1..=4 {
        let h = modal(d, &random_coeffs(&mut rng, 20));
        let (c, s) = d.project(k, &h).unwrap();
        let (cc, cs) = d.project(k, &c).unwrap();
        let (sc, _) = d.project(k, &s).unwrap();
        assert!(cc.sub(&c).unwrap().norm_inf() <= 1e-10);
        assert!(cs.norm_inf() <= 1e-10 && sc.norm_inf() <= 1e-10);
        assert!(c.add(&s).unwrap().sub(&h).unwrap().norm_inf() <= 1e-12);
    }
}

#[test]
fn semigroup() {
    let p = common::pipeline();
    let d = &p.decomp;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = modal(d, &random_coeffs(&mut rng, 15));
    let same = d.semigroup(0.0, &h).unwrap();
    assert!(same.sub(&h).unwrap().norm_inf() <= 1e-10 * h.norm_inf());

    let c = Field::constant(&p.grid, 0.3);
    let ec = d.semigroup(1.0, &c).unwrap();
    let growth = (-d.lambda(1)).exp();
    for v in ec.values() {
        assert_relative_eq!(*v, 0.3 * growth, max_relative = 1e-8);
    }

    let half = d.semigroup(0.5, &d.semigroup(0.5, &h).unwrap()).unwrap();
    let full = d.semigroup(1.0, &h).unwrap();
    assert!(d.norm(half.sub(&full).unwrap().values()) <= 1e-10 * d.norm(h.values()));

    assert!(d.semigroup(-0.1, &h).is_err());

    // decay on the stable part
    let k = p.gap.k;
    let (_, hs) = d.project(k, &h).unwrap();
    let out = d.semigroup(1.0, &hs).unwrap();
    let bound = (-d.lambda(k + 1)).exp() * d.norm(hs.values());
    assert!(d.norm(out.values()) <= bound * (1.0 + 1e-10));
}

#[test]
fn center_inverse() {
    let p = common::pipeline();
    let d = &p.decomp;
    let phi1 = d.phi_field(1);
    let inv = d.invert_center(1, &phi1).unwrap();
    let want = phi1.scaled(d.lambda(1).exp());
    assert!(inv.sub(&want).unwrap().norm_inf() <= 1e-10);

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let mut c = random_coeffs(&mut rng, 2);
        c.resize(2, 0.0);
        let f = modal(d, &c);
        let g = d.invert_center(2, &f).unwrap();
        let back = d.semigroup(1.0, &g).unwrap();
        assert!(back.sub(&f).unwrap().norm_inf() <= 1e-10 * (1.0 + f.norm_inf()));
        assert!(d.norm(g.values()) <= d.lambda(2).exp() * d.norm(f.values()) * (1.0 + 1e-12));
    }
    assert!(d.invert_center(1, &d.phi_field(2)).is_err());
}

#[test]
fn ladder_for_each_cut() {
    let p = common::pipeline();
    let d = &p.decomp;
    let g1 = gap_parameters(d, 1, 0.9, None).unwrap();
    assert!(g1.ladder_ordered());
    assert_eq!(g1.big_lambda_c, g1.big_lambda_max);
    for k in 2..=4 {
        let g = gap_parameters(d, k, 0.9, None).unwrap();
        assert!(g.ladder_ordered(), "K = {k}");
        assert!(g.big_lambda_c < g.big_lambda_max);
        assert!(g.eps_gap > 0.0 && g.k_contr <= 0.9 + 1e-12);
        assert!(g.ratios(0.0).iter().all(|r| *r < 1.0));
    }
    assert!(gap_parameters(d, 0, 0.9, None).is_err());
    assert!(gap_parameters(d, 1, 1.5, None).is_err());
    assert!(gap_parameters(d, 1, 0.9, Some(5.0)).is_err());
}

#[test]
fn gap_at_default_cut() {
    let g = common::pipeline().gap;
    // with λ_1 = −1, λ_2 = 3 the binding ratio is the stable one:
    // ε_gap = 0.9 e^{−1} − e^{−3}
    let limit = 0.9 * (-1.0f64).exp() - (-3.0f64).exp();
    assert!((g.eps_gap - limit).abs() <= 2e-5);
    assert_relative_eq!(g.eps_gap, 0.281_313_946_427_918_07, max_relative = 1e-9);
    assert_relative_eq!(g.k_contr, 0.9, max_relative = 1e-12);
}

#[test]
fn eigenvalues_converge_under_refinement() {
    let a = decomp(401, 6);
    let b = decomp(801, 6);
    for k in 2..=3 {
        assert!((a.lambda(k) - b.lambda(k)).abs() <= 1e-3 * b.lambda(k));
    }
    // second-order Richardson extrapolation lands on 3, 10, 20
    for (k, want) in [(2, 3.0), (3, 10.0), (4, 20.0)] {
        let r = (4.0 * b.lambda(k) - a.lambda(k)) / 3.0;
        assert!((r - want).abs() <= 1e-3 * want, "k = {k}: {r}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn l_is_self_adjoint(cu in prop::collection::vec(-1.0f64..1.0, 6),
                         cv in prop::collection::vec(-1.0f64..1.0, 6)) {
        let p = common::pipeline();
        let u = common::sines(&p.grid, &cu);
        let v = common::sines(&p.grid, &cv);
        let a = &p.assembly;
        let lu = a.apply_l(&u).unwrap();
        let lv = a.apply_l(&v).unwrap();
        let x = a.inner(lu.values(), v.values());
        let y = a.inner(u.values(), lv.values());
        prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()));
    }
}
