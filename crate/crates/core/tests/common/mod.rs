#![allow(dead_code)]

use std::sync::{Arc, OnceLock};

use fdx_core::experiments::{Pipeline, RunConfig};
use fdx_core::grid::{build_grid, DomainKind, Field, Grid};
use fdx_core::stationary::{solve_stationary, StationaryState};

/// Default configuration: interval, p = 2, n = 401, k_max = 40.
pub fn pipeline() -> &'static Pipeline {
    static P: OnceLock<Pipeline> = OnceLock::new();
    P.get_or_init(|| Pipeline::build(&RunConfig::default()).unwrap())
}

pub fn interval_state(n: usize) -> StationaryState {
    let g = build_grid(DomainKind::Interval, 1, n, 1.0).unwrap();
    solve_stationary(2.0, &g, 1e-10).unwrap()
}

pub fn sines(grid: &Arc<Grid>, coeffs: &[f64]) -> Field {
    Field::from_fn(grid, |x| {
        coeffs
            .iter()
            .enumerate()
            .map(|(j, c)| c * ((j + 1) as f64 * std::f64::consts::PI * x).sin())
            .sum()
    })
}

/// Random field `Σ c_j cos(jπx)` with `‖·‖_∞ = amp`, constant mode included.
pub fn smooth(grid: &Arc<Grid>, rng: &mut rand_chacha::ChaCha8Rng, terms: usize, amp: f64) -> Field {
    use rand::Rng;
    let c: Vec<f64> = (0..terms)
        .map(|j| rng.random_range(-1.0..1.0) / (1 + j * j) as f64)
        .collect();
    let f = Field::from_fn(grid, |x| {
        c.iter()
            .enumerate()
            .map(|(j, cj)| cj * (j as f64 * std::f64::consts::PI * x).cos())
            .sum()
    });
    let s = f.norm_inf();
    f.scaled(amp / s)
}
