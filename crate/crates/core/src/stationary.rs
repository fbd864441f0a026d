//! Positive solutions of −ΔV = V^p with zero Dirichlet data: shooting for a
//! global bracket, then Newton on the discrete flux system.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{FdxError, Result};
use crate::grid::{fmt_f64, gradient_values, DomainKind, Field, Grid};
use crate::tridiag::TridiagonalLu;

const RK_SUBSTEPS: usize = 4;
const NEWTON_MAX_ITER: usize = 50;
const S_MIN: f64 = 1e-3;
const S_MAX: f64 = 1e3;

#[derive(Debug, Clone)]
pub struct StationaryState {
    v: Field,
    p: f64,
    /// Shooting root: V′(0) on the interval, V(0) on the ball.
    s_star: f64,
    /// The same quantity read off the Newton solution.
    s_newton: f64,
    residual: f64,
    tol: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StationarySummary {
    pub schema_version: u32,
    pub p: f64,
    pub s_star: f64,
    pub s_newton: f64,
    pub v_max: f64,
    pub residual: f64,
    pub c_low: f64,
    pub c_high: f64,
}

/// Upper end of the admissible exponent range, `None` when unbounded.
pub fn critical_exponent(dim: usize) -> Option<f64> {
    if dim <= 2 {
        None
    } else {
        Some((dim as f64 + 2.0) / (dim as f64 - 2.0))
    }
}

pub fn check_exponent(p: f64, dim: usize) -> Result<()> {
    if !(p > 1.0) || !p.is_finite() {
        return Err(FdxError::InvalidParameter(format!(
            "exponent p = {p} must exceed 1"
        )));
    }
    if let Some(pc) = critical_exponent(dim) {
        if p >= pc {
            return Err(FdxError::InvalidParameter(format!(
                "exponent p = {p} is not subcritical for N = {dim} (need p < {pc})"
            )));
        }
    }
    Ok(())
}

/// `|v|^{p−1} v`, with an integer fast path.
#[inline]
pub(crate) fn signed_pow(v: f64, p: f64) -> f64 {
    if p == 2.0 {
        v * v.abs()
    } else {
        v.abs().powf(p - 1.0) * v
    }
}

#[inline]
pub(crate) fn pos_pow(v: f64, p: f64) -> f64 {
    if p == p.trunc() && p.abs() < 32.0 {
        v.powi(p as i32)
    } else {
        v.powf(p)
    }
}

fn ode_rhs(x: f64, v: f64, dv: f64, p: f64, dim: usize) -> (f64, f64) {
    let src = signed_pow(v, p);
    if dim == 1 {
        (dv, -src)
    } else if x == 0.0 {
        // regular center: (N−1)V′/x → (N−1)V″(0)
        (dv, -src / dim as f64)
    } else {
        (dv, -src - (dim as f64 - 1.0) / x * dv)
    }
}

fn shoot_profile(p: f64, s: f64, grid: &Grid) -> Vec<f64> {
    shoot_trajectory(p, s, grid).0
}

/// Nodal values of V and V′ along the shot.
pub(crate) fn shoot_trajectory(p: f64, s: f64, grid: &Grid) -> (Vec<f64>, Vec<f64>) {
    let dim = grid.dim();
    let (mut v, mut dv) = match grid.kind() {
        DomainKind::Interval => (0.0, s),
        DomainKind::RadialBall => (s, 0.0),
    };
    let x = grid.x();
    let mut out = Vec::with_capacity(x.len());
    let mut dout = Vec::with_capacity(x.len());
    out.push(v);
    dout.push(dv);
    for i in 0..x.len() - 1 {
        let h = (x[i + 1] - x[i]) / RK_SUBSTEPS as f64;
        for j in 0..RK_SUBSTEPS {
            let t = x[i] + j as f64 * h;
            let (k1a, k1b) = ode_rhs(t, v, dv, p, dim);
            let (k2a, k2b) = ode_rhs(t + 0.5 * h, v + 0.5 * h * k1a, dv + 0.5 * h * k1b, p, dim);
            let (k3a, k3b) = ode_rhs(t + 0.5 * h, v + 0.5 * h * k2a, dv + 0.5 * h * k2b, p, dim);
            let (k4a, k4b) = ode_rhs(t + h, v + h * k3a, dv + h * k3b, p, dim);
            v += h / 6.0 * (k1a + 2.0 * k2a + 2.0 * k3a + k4a);
            dv += h / 6.0 * (k1b + 2.0 * k2b + 2.0 * k3b + k4b);
        }
        out.push(v);
        dout.push(dv);
    }
    (out, dout)
}

/// Signed value at x = 1 of the initial value problem started with parameter `s`.
pub fn shoot(p: f64, s: f64, grid: &Grid) -> Result<f64> {
    if !(s > 0.0) || !s.is_finite() {
        return Err(FdxError::InvalidParameter(format!(
            "shooting parameter s = {s} must be positive"
        )));
    }
    Ok(*shoot_profile(p, s, grid).last().unwrap())
}

/// Smallest root of the shooting endpoint, found by doubling then bisection.
pub fn shooting_root(p: f64, grid: &Grid) -> Result<f64> {
    let mut lo = S_MIN;
    if shoot(p, lo, grid)? <= 0.0 {
        return Err(FdxError::BracketingFailure { lo: S_MIN, hi: S_MAX });
    }
    let mut hi = lo;
    loop {
        let next = hi * 2.0;
        if next > S_MAX {
            return Err(FdxError::BracketingFailure { lo: S_MIN, hi: S_MAX });
        }
        if shoot(p, next, grid)? <= 0.0 {
            hi = next;
            break;
        }
        lo = next;
        hi = next;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if shoot(p, mid, grid)? > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Discrete residual of the flux system at interior (non-Dirichlet) rows,
/// reported as max |r_i| / q_i relative to max(1, max μV^p). The relative
/// scaling keeps the figure above the rounding floor ~ ε·V/Δx².
fn residual_vector(v: &[f64], p: f64, grid: &Grid, r: &mut [f64]) -> f64 {
    let n = grid.len();
    let x = grid.x();
    let mut worst = 0.0_f64;
    let mut scale = 1.0_f64;
    for i in 0..n {
        if grid.is_boundary(i) {
            r[i] = v[i];
            continue;
        }
        let mut ri = -grid.q()[i] * grid.mu()[i] * pos_pow(v[i].max(0.0), p);
        if i + 1 < n {
            ri -= grid.mu_mid(i) * (v[i + 1] - v[i]) / (x[i + 1] - x[i]);
        }
        if i > 0 {
            ri += grid.mu_mid(i - 1) * (v[i] - v[i - 1]) / (x[i] - x[i - 1]);
        }
        r[i] = ri;
        worst = worst.max(ri.abs() / grid.q()[i]);
        scale = scale.max(grid.mu()[i] * pos_pow(v[i].max(0.0), p));
    }
    worst / scale
}

fn newton(v: &mut [f64], p: f64, grid: &Grid, tol: f64) -> Result<f64> {
    let n = grid.len();
    let x = grid.x();
    let mut r = vec![0.0; n];
    let mut res = residual_vector(v, p, grid, &mut r);
    for _ in 0..NEWTON_MAX_ITER {
        if res <= tol {
            return Ok(res);
        }
        let mut sub = vec![0.0; n - 1];
        let mut diag = vec![0.0; n];
        let mut sup = vec![0.0; n - 1];
        for i in 0..n {
            if grid.is_boundary(i) {
                diag[i] = 1.0;
                continue;
            }
            let mut d = -p * grid.q()[i] * grid.mu()[i] * pos_pow(v[i].max(0.0), p - 1.0);
            if i + 1 < n {
                let c = grid.mu_mid(i) / (x[i + 1] - x[i]);
                d += c;
                sup[i] = -c;
            }
            if i > 0 {
                let c = grid.mu_mid(i - 1) / (x[i] - x[i - 1]);
                d += c;
                sub[i - 1] = -c;
            }
            diag[i] = d;
        }
        let lu = TridiagonalLu::factor(&sub, &diag, &sup)?;
        let mut step: Vec<f64> = r.iter().map(|v| -v).collect();
        lu.solve_in_place(&mut step);
        let mut alpha = 1.0;
        let mut trial = vec![0.0; n];
        loop {
            let mut ok = true;
            for i in 0..n {
                if grid.is_boundary(i) {
                    trial[i] = 0.0;
                    continue;
                }
                trial[i] = v[i] + alpha * step[i];
                if !(trial[i] > 0.0) {
                    ok = false;
                }
            }
            if ok || alpha < 1e-12 {
                break;
            }
            alpha *= 0.5;
        }
        v.copy_from_slice(&trial);
        res = residual_vector(v, p, grid, &mut r);
        if !res.is_finite() {
            break;
        }
    }
    if res <= tol {
        Ok(res)
    } else {
        Err(FdxError::NewtonStagnation {
            iterations: NEWTON_MAX_ITER,
            residual: res,
        })
    }
}

pub fn solve_stationary(p: f64, grid: &Arc<Grid>, tol: f64) -> Result<StationaryState> {
    check_exponent(p, grid.dim())?;
    if !(tol > 0.0) {
        return Err(FdxError::InvalidParameter(format!(
            "stationary tolerance {tol} must be positive"
        )));
    }
    let s_star = shooting_root(p, grid)?;
    let mut v = shoot_profile(p, s_star, grid);
    let n = grid.len();
    for i in 0..n {
        if grid.is_boundary(i) {
            v[i] = 0.0;
        } else if v[i] <= 0.0 {
            v[i] = 1e-8;
        }
    }
    let residual = newton(&mut v, p, grid, tol)?;
    let s_newton = match grid.kind() {
        DomainKind::Interval => gradient_values(grid.x(), &v)[0],
        DomainKind::RadialBall => v[0],
    };
    Ok(StationaryState {
        v: Field::new(grid.clone(), v)?,
        p,
        s_star,
        s_newton,
        residual,
        tol,
    })
}

impl StationaryState {
    pub fn v(&self) -> &Field {
        &self.v
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.v.grid()
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn s_star(&self) -> f64 {
        self.s_star
    }

    pub fn s_newton(&self) -> f64 {
        self.s_newton
    }

    pub fn residual(&self) -> f64 {
        self.residual
    }

    pub fn tol(&self) -> f64 {
        self.tol
    }

    pub fn v_max(&self) -> f64 {
        self.v.values().iter().fold(0.0_f64, |m, &v| m.max(v))
    }

    /// Recompute the discrete residual and compare it with the tolerance.
    pub fn verify(&self) -> Result<()> {
        let grid = self.grid();
        let mut r = vec![0.0; grid.len()];
        let res = residual_vector(self.v.values(), self.p, grid, &mut r);
        let positive = (0..grid.len())
            .all(|i| grid.is_boundary(i) || self.v.values()[i] > 0.0);
        let zero_bc = (0..grid.len())
            .all(|i| !grid.is_boundary(i) || self.v.values()[i] == 0.0);
        if res <= self.tol && positive && zero_bc {
            Ok(())
        } else {
            Err(FdxError::UnsolvedState(format!(
                "residual {res:e} (tol {:e}), positive interior: {positive}, zero boundary: {zero_bc}",
                self.tol
            )))
        }
    }

    pub fn summary(&self) -> StationarySummary {
        let (c_low, c_high) = boundary_comparability(self);
        StationarySummary {
            schema_version: crate::SCHEMA_VERSION,
            p: self.p,
            s_star: self.s_star,
            s_newton: self.s_newton,
            v_max: self.v_max(),
            residual: self.residual,
            c_low,
            c_high,
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["x", "V"])?;
        for (x, v) in self.grid().x().iter().zip(self.v.values()) {
            wr.write_record([fmt_f64(*x), fmt_f64(*v)])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Min and max of V / dist(x, ∂Ω) over interior nodes.
pub fn boundary_comparability(state: &StationaryState) -> (f64, f64) {
    let grid = state.grid();
    let mut lo = f64::INFINITY;
    let mut hi = 0.0_f64;
    for i in 0..grid.len() {
        if grid.is_boundary(i) {
            continue;
        }
        let r = state.v.values()[i] / grid.boundary_distance(i);
        lo = lo.min(r);
        hi = hi.max(r);
    }
    (lo, hi)
}
