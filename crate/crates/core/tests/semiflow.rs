mod common;

use approx::assert_relative_eq;
use fdx_core::experiments::separable_datum;
use fdx_core::grid::Field;
use fdx_core::nonlinearity::{Nonlinearity, TruncationConfig};
use fdx_core::semiflow::{
    fit_decay_rate, grad_bound_monitor, picard_solve, remainder_r, solve_relative_error,
    rescale_w, solve_original_w, solve_rescaled_v, step_truncated, time_one_map, time_t_map, EvolveOptions, Flow, Stepper,
    TrajectoryRecord,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cfg() -> TruncationConfig {
    TruncationConfig::new(0.05, 0.05).unwrap()
}

/// Smooth datum with V|∂h| comparable to ε, so the truncation matters.
fn datum(seed: u64, scale: f64) -> Field {
    let p = common::pipeline();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = common::smooth(&p.grid, &mut rng, 5, 1.0);
    let nl = Nonlinearity::new(&p.assembly);
    h.scaled(scale * cfg().eps / nl.sup_v_grad(h.values()).max(h.norm_inf()))
}

#[test]
fn zero_is_fixed() {
    let p = common::pipeline();
    let z = Field::zeros(&p.grid);
    assert!(time_one_map(&z, &cfg(), &p.decomp).unwrap().values().iter().all(|v| *v == 0.0));
    assert!(remainder_r(&z, &cfg(), &p.decomp).unwrap().norm_inf() == 0.0);
    let rec = solve_relative_error(&z, &p.decomp, 1.0, false, &EvolveOptions::default()).unwrap();
    assert!(rec.snapshots.iter().all(|s| s.norm_inf() == 0.0));
    let pic = picard_solve(&z, &cfg(), &p.decomp, 1.0, 1e-12, 1.0 / 64.0).unwrap();
    assert!(pic.record.snapshots.iter().all(|s| s.norm_inf() == 0.0));
}

#[test]
fn dead_cutoff_regime_is_linear() {
    let p = common::pipeline();
    let dt = 1.0 / 256.0;
    let c = 3.0 * cfg().eps;
    let out = step_truncated(&Field::constant(&p.grid, c), dt, &cfg(), &p.decomp).unwrap();
    for v in out.values() {
        assert_relative_eq!(*v, c * ((p.assembly.p() - 1.0) * dt).exp(), max_relative = 1e-10);
    }
    assert!(step_truncated(&Field::zeros(&p.grid), 0.5, &cfg(), &p.decomp).is_err());
}

#[test]
fn second_order_in_dt() {
    let p = common::pipeline();
    let h0 = datum(1, 1.5);
    let run = |dt: f64| {
        Stepper::new(&p.decomp, Flow::Truncated { eps: cfg().eps }, dt)
            .unwrap()
            .advance(&h0, 1.0)
            .unwrap()
    };
    let (a, b, c) = (run(1.0 / 16.0), run(1.0 / 32.0), run(1.0 / 64.0));
    let d1 = p.decomp.norm(a.sub(&b).unwrap().values());
    let d2 = p.decomp.norm(b.sub(&c).unwrap().values());
    let ratio = d1 / d2;
    assert!((3.0..=5.0).contains(&ratio), "refinement ratio {ratio}");
}

#[test]
fn time_maps_compose() {
    let p = common::pipeline();
    let h0 = datum(2, 1.0);
    let one = time_one_map(&h0, &cfg(), &p.decomp).unwrap();
    let twice = time_one_map(&one, &cfg(), &p.decomp).unwrap();
    let two = time_t_map(&h0, 2.0, &cfg(), &p.decomp).unwrap();
    assert!(p.decomp.norm(twice.sub(&two).unwrap().values()) <= 1e-6);
}

/// sup_t ‖h − h̃‖² + Σ dt A[h − h̃] over one time unit.
fn energy(a: &TrajectoryRecord, b: &TrajectoryRecord, asm: &fdx_core::operator::OperatorAssembly) -> f64 {
    let mut sup = 0.0_f64;
    let mut dissipation = 0.0;
    for j in 0..a.len() {
        let d = a.snapshots[j].sub(&b.snapshots[j]).unwrap();
        sup = sup.max(asm.inner(d.values(), d.values()));
        if j > 0 {
            let dt = a.times[j] - a.times[j - 1];
            dissipation += dt * asm.stiffness_form(d.values(), d.values());
        }
    }
    sup + dissipation
}

#[test]
fn stability_estimate() {
    let p = common::pipeline();
    let d = &p.decomp;
    let opts = EvolveOptions {
        dt: 1.0 / 256.0,
        every: 1.0 / 256.0,
        eps: cfg().eps,
    };
    let mut c = f64::NEG_INFINITY;
    for s in 0..20 {
        let mut h = datum(100 + s, 2.0);
        let mut g = datum(200 + s, 2.0);
        for f in [&mut h, &mut g] {
            let n = d.norm(f.values());
            if n > 0.1 {
                *f = f.scaled(0.1 / n);
            }
        }
        let a = solve_relative_error(&h, d, 1.0, true, &opts).unwrap();
        let b = solve_relative_error(&g, d, 1.0, true, &opts).unwrap();
        let d0 = h.sub(&g).unwrap();
        let e0 = p.assembly.inner(d0.values(), d0.values());
        c = c.max((energy(&a, &b, &p.assembly) / e0).ln());
    }
    // the linear energy identity gives C = 2(p − 1); the nonlinearity adds O(ε)
    assert!(c.is_finite() && c <= 2.0 * (p.assembly.p() - 1.0) + 0.5, "C = {c}");
}

#[test]
fn remainder_is_quadratic() {
    let p = common::pipeline();
    let phi2 = p.decomp.phi_field(2);
    // ε large enough that δ = 0.1 still sits on the cutoff plateau
    let (mut lx, mut ly) = (vec![], vec![]);
    for e in 1..=4 {
        let delta = 10f64.powi(-e);
        let r = remainder_r(&phi2.scaled(delta), &TruncationConfig::new(0.24, 0.24).unwrap(), &p.decomp).unwrap();
        lx.push(delta.ln());
        ly.push(p.decomp.norm(r.values()).ln());
    }
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    assert!((slope - 2.0).abs() <= 0.1, "slope {slope}");
}

#[test]
fn picard_agrees_with_stepping() {
    let p = common::pipeline();
    for s in 0..3 {
        let h0 = datum(300 + s, 1.0);
        let pic = picard_solve(&h0, &cfg(), &p.decomp, 1.0, 1e-12, 1.0 / 256.0).unwrap();
        let step = time_one_map(&h0, &cfg(), &p.decomp).unwrap();
        let diff = p.decomp.norm(pic.record.last().unwrap().sub(&step).unwrap().values());
        assert!(diff <= 1e-5, "diff {diff:e}");
        assert!(pic.contraction < 1.0);
    }
    let h0 = datum(1, 1.0);
    assert!(picard_solve(&h0, &cfg(), &p.decomp, 2.0, 1e-10, 1.0 / 64.0).is_err());
}

#[test]
fn relative_error_runs() {
    let p = common::pipeline();
    let d = &p.decomp;
    let opts = EvolveOptions::default();
    // the δ² forcing of the unstable mode overtakes the decaying φ_2 after t ≈ 2
    let rec = solve_relative_error(&d.phi_field(2).scaled(1e-3), d, 1.5, false, &opts).unwrap();
    let (rate, r2) = fit_decay_rate(&rec.times, &rec.norm_p1, None).unwrap();
    assert!((rate - d.lambda(2)).abs() <= 0.05 * d.lambda(2), "rate {rate}");
    assert!(r2 > 0.999);

    let rec = solve_relative_error(&Field::constant(&p.grid, 1e-3), d, 6.0, true, &opts).unwrap();
    assert!(!rec.trunc_active[0]);
    assert!(*rec.trunc_active.last().unwrap());

    let bad = Field::constant(&p.grid, -1.5);
    assert!(solve_relative_error(&bad, d, 1.0, false, &opts).is_err());
}

#[test]
fn rescaled_flow() {
    let p = common::pipeline();
    let d = &p.decomp;
    let opts = EvolveOptions::default();
    let v = p.state.v();
    let rec = solve_rescaled_v(v, d, 2.0, &opts).unwrap();
    for s in &rec.snapshots {
        assert!(s.sub(v).unwrap().norm_inf() <= 1e-8);
    }
    let rec = solve_rescaled_v(&v.scaled(1.001), d, 2.0, &opts).unwrap();
    let (rate, _) = fit_decay_rate(&rec.times, &rec.norm_inf, None).unwrap();
    assert_relative_eq!(-rate, p.assembly.p() - 1.0, max_relative = 1e-3);
}

#[test]
fn decay_fits() {
    let t: Vec<f64> = (0..50).map(|j| j as f64 * 0.1).collect();
    let y: Vec<f64> = t.iter().map(|t| (-2.0 * t).exp()).collect();
    let (rate, r2) = fit_decay_rate(&t, &y, None).unwrap();
    assert!((rate - 2.0).abs() <= 1e-8 && (r2 - 1.0).abs() <= 1e-12);
    let y: Vec<f64> = t.iter().map(|t| (-2.0 * t).exp() * (1.0 + 0.01 * t.sin())).collect();
    assert!((fit_decay_rate(&t, &y, None).unwrap().0 - 2.0).abs() <= 0.01);
    let y = vec![3.0; t.len()];
    assert!(fit_decay_rate(&t, &y, None).unwrap().0.abs() <= 1e-8);
    let (rate, _) = fit_decay_rate(&t, &y, Some(1.0)).unwrap();
    assert!(rate.abs() <= 1e-8);
    assert!(fit_decay_rate(&t[..4], &y[..4], None).is_err());
    let mut neg = y.clone();
    neg[3] = 0.0;
    assert!(fit_decay_rate(&t, &neg, None).is_err());
}

#[test]
fn gradient_monitor() {
    let p = common::pipeline();
    let d = &p.decomp;
    let opts = EvolveOptions::default();
    let zero = solve_relative_error(&Field::zeros(&p.grid), d, 2.0, false, &opts).unwrap();
    assert_eq!(grad_bound_monitor(&zero, 0.05).sup_v_grad_after_one, 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let h0 = common::smooth(&p.grid, &mut rng, 5, 1e-3);
    let rec = solve_relative_error(&h0, d, 2.0, false, &opts).unwrap();
    let rep = grad_bound_monitor(&rec, 0.05);
    assert!(rep.holds && rep.sup_v_grad_after_one <= 0.1 * rep.eps);

    // steep interior ramp: parabolic smoothing flattens it over [0, 1]
    let steep = Field::from_fn(&p.grid, |x| 0.02 * (40.0 * (x - 0.5)).tanh());
    let rec = solve_relative_error(&steep, d, 1.0, false, &opts).unwrap();
    assert!(rec.sup_v_grad.last().unwrap() < &rec.sup_v_grad[0]);
}

#[test]
fn separable_extinction() {
    let p = common::pipeline();
    let w0 = separable_datum(&p.state, 2.0);
    let v0 = rescale_w(&w0, 0.0, 2.0, p.state.p()).unwrap();
    assert!(v0.sub(p.state.v()).unwrap().norm_inf() <= 1e-12 * p.state.v_max());
    assert!(rescale_w(&w0, 2.0, 2.0, p.state.p()).is_err());

    let rec = solve_original_w(&w0, &p.state, 2.0 / 2000.0, 20).unwrap();
    assert!((rec.t_extinction - 2.0).abs() <= 0.05 * 2.0, "T = {}", rec.t_extinction);
    assert!(rec.mass.windows(2).all(|w| w[1] <= w[0]));
}
