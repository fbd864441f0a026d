//! Time integration of the relative-error equation ∂_t h + L h = M(h) and its
//! truncation, the time-one map S = L + R, a Picard oracle, and the flows of
//! v and w.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{FdxError, Result};
use crate::grid::{fmt_f64, Field, Grid};
use crate::nonlinearity::{Nonlinearity, TruncationConfig};
use crate::operator::{OperatorAssembly, SpectralDecomposition};
use crate::stationary::{pos_pow, StationaryState};
use crate::tridiag::{SymTridiagonalLdl, TridiagonalLu};

/// Default time step.
pub const DEFAULT_DT: f64 = 1.0 / 256.0;
/// Sup-norm level treated as blow-up of the relative error.
pub const BLOW_UP: f64 = 10.0;

/// Which nonlinearity drives the flow.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Flow {
    Truncated { eps: f64 },
    Untruncated,
}

#[inline]
fn phi1(z: f64) -> f64 {
    if z.abs() < 1e-8 {
        1.0 + 0.5 * z
    } else {
        z.exp_m1() / z
    }
}

#[inline]
fn phi2(z: f64) -> f64 {
    if z.abs() < 1e-2 {
        0.5 + z * (1.0 / 6.0 + z * (1.0 / 24.0 + z * (1.0 / 120.0 + z / 720.0)))
    } else {
        (z.exp_m1() - z) / (z * z)
    }
}

/// Implicit-Euler propagator `(I + s L)^{−1}` on positive-mass nodes.
#[derive(Debug, Clone)]
struct TailSolver {
    s: f64,
    ldl: SymTridiagonalLdl,
    /// `1 / (1 + s λ_k)`, the propagator's action on eigenfields.
    modal: Vec<f64>,
}

impl TailSolver {
    fn new(asm: &OperatorAssembly, lambda: &[f64], s: f64) -> Result<Self> {
        let (lo, hi) = asm.active_range();
        let shift = asm.shift();
        let edge = asm.edge();
        let mass = asm.mass();
        let diag: Vec<f64> = (lo..=hi)
            .map(|i| {
                let left = if i > lo { edge[i - 1] } else { 0.0 };
                let right = if i < hi { edge[i] } else { 0.0 };
                mass[i] * (1.0 - s * shift) + s * (left + right)
            })
            .collect();
        let off: Vec<f64> = (lo..hi).map(|i| -s * edge[i]).collect();
        let ldl = SymTridiagonalLdl::factor(&diag, &off).map_err(|_| {
            FdxError::InvalidParameter(format!(
                "time step {s} too large: I + dt L is not positive definite"
            ))
        })?;
        Ok(Self {
            s,
            ldl,
            modal: lambda.iter().map(|l| 1.0 / (1.0 + s * l)).collect(),
        })
    }

    /// `out = (I + sL)^{−1}(h + s f)` on active nodes.
    fn apply(&self, asm: &OperatorAssembly, h: &[f64], f: Option<&[f64]>, out: &mut [f64]) {
        let (lo, hi) = asm.active_range();
        let mass = asm.mass();
        let buf = &mut out[lo..=hi];
        for (j, i) in (lo..=hi).enumerate() {
            let rhs = match f {
                Some(f) => h[i] + self.s * f[i],
                None => h[i],
            };
            buf[j] = mass[i] * rhs;
        }
        self.ldl.solve_in_place(buf);
    }
}

/// Reusable integrator with precomputed modal factors and tail factorizations.
///
/// The state is a nodal field together with its coefficients on the first
/// k_max eigenfields. Modes are advanced by the exponential midpoint rule,
/// the remainder by implicit Euler.
#[derive(Debug, Clone)]
pub struct Stepper {
    decomp: Arc<SpectralDecomposition>,
    nl: Nonlinearity,
    flow: Flow,
    dt: f64,
    e_full: Vec<f64>,
    e_half: Vec<f64>,
    p1_full: Vec<f64>,
    p1_half: Vec<f64>,
    tail_full: TailSolver,
    tail_half: TailSolver,
    m: Vec<f64>,
    mc: Vec<f64>,
    tmp: Vec<f64>,
    corr: Vec<f64>,
}

impl Stepper {
    pub fn new(decomp: &Arc<SpectralDecomposition>, flow: Flow, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt <= 0.1) {
            return Err(FdxError::InvalidParameter(format!(
                "time step dt = {dt} must lie in (0, 0.1]"
            )));
        }
        if let Flow::Truncated { eps } = flow {
            if !(eps > 0.0) {
                return Err(FdxError::InvalidParameter(format!(
                    "truncation eps = {eps} must be positive"
                )));
            }
        }
        let asm = decomp.assembly();
        let lam = decomp.lambdas();
        let n = asm.grid().len();
        let k = lam.len();
        Ok(Self {
            decomp: decomp.clone(),
            nl: Nonlinearity::new(asm),
            flow,
            dt,
            e_full: lam.iter().map(|l| (-l * dt).exp()).collect(),
            e_half: lam.iter().map(|l| (-l * 0.5 * dt).exp()).collect(),
            p1_full: lam.iter().map(|l| dt * phi1(-l * dt)).collect(),
            p1_half: lam.iter().map(|l| 0.5 * dt * phi1(-l * 0.5 * dt)).collect(),
            tail_full: TailSolver::new(asm, lam, dt)?,
            tail_half: TailSolver::new(asm, lam, 0.5 * dt)?,
            m: vec![0.0; n],
            mc: vec![0.0; k],
            tmp: vec![0.0; n],
            corr: vec![0.0; k],
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn flow(&self) -> Flow {
        self.flow
    }

    pub fn decomp(&self) -> &Arc<SpectralDecomposition> {
        &self.decomp
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.decomp.grid()
    }

    fn eval_m(&mut self, h: &[f64], time: f64) -> Result<()> {
        match self.flow {
            Flow::Truncated { eps } => self.nl.eval_trunc(h, eps, &mut self.m),
            Flow::Untruncated => self.nl.eval(h, &mut self.m)?,
        }
        if self.m.iter().any(|v| !v.is_finite()) {
            return Err(FdxError::NonFinite { time });
        }
        for (c, mp) in self.mc.iter_mut().zip(0..self.decomp.k_max()) {
            *c = self.decomp.coefficient(&self.m, mp + 1);
        }
        Ok(())
    }

    /// Prepare the internal representation of `h` (coefficients and closure).
    fn load(&self, h: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let a = self.decomp.coefficients(h, self.decomp.k_max());
        let mut x = h.to_vec();
        self.decomp.assembly().close(&mut x);
        (x, a)
    }

    /// One step from `(h, a)`; `time` only labels diagnostics.
    fn step_state(&mut self, h: &mut Vec<f64>, a: &mut [f64], time: f64) -> Result<()> {
        let k = a.len();
        self.eval_m(h, time)?;
        // half step: h½ = (I + ½dt L)^{−1}(h + ½dt m) + Φ[a½ − (a + ½dt m_c)/(1 + ½dt λ)]
        let mut half = std::mem::take(&mut self.tmp);
        self.tail_half.apply(self.decomp.assembly(), h, Some(&self.m), &mut half);
        let mut a_half = vec![0.0; k];
        for j in 0..k {
            a_half[j] = self.e_half[j] * a[j] + self.p1_half[j] * self.mc[j];
            self.corr[j] =
                a_half[j] - (a[j] + 0.5 * self.dt * self.mc[j]) * self.tail_half.modal[j];
        }
        self.add_modes(&mut half);
        self.decomp.assembly().close(&mut half);
        self.eval_m(&half, time + 0.5 * self.dt)?;
        // full step driven by the midpoint nonlinearity
        self.tail_full.apply(self.decomp.assembly(), h, Some(&self.m), &mut half);
        for j in 0..k {
            let next = self.e_full[j] * a[j] + self.p1_full[j] * self.mc[j];
            self.corr[j] = next - (a[j] + self.dt * self.mc[j]) * self.tail_full.modal[j];
            a[j] = next;
        }
        self.add_modes(&mut half);
        self.decomp.assembly().close(&mut half);
        std::mem::swap(h, &mut half);
        self.tmp = half;
        Ok(())
    }

    fn add_modes(&self, out: &mut [f64]) {
        let (lo, hi) = self.decomp.assembly().active_range();
        for (j, c) in self.corr.iter().enumerate() {
            if *c == 0.0 {
                continue;
            }
            let ph = &self.decomp.phi(j + 1)[lo..=hi];
            for (o, v) in out[lo..=hi].iter_mut().zip(ph) {
                *o += c * v;
            }
        }
    }

    fn check_field(&self, h: &Field) -> Result<()> {
        if h.len() != self.grid().len() {
            return Err(FdxError::LengthMismatch {
                expected: self.grid().len(),
                got: h.len(),
            });
        }
        Ok(())
    }

    fn steps_for(&self, t: f64) -> Result<usize> {
        if !(t >= 0.0) || !t.is_finite() {
            return Err(FdxError::InvalidParameter(format!(
                "evolution time t = {t} must be nonnegative"
            )));
        }
        let steps = (t / self.dt).round();
        if (steps * self.dt - t).abs() > 1e-9 * t.max(1.0) {
            return Err(FdxError::InvalidParameter(format!(
                "evolution time t = {t} is not a multiple of dt = {}",
                self.dt
            )));
        }
        Ok(steps as usize)
    }

    /// One step of size dt.
    pub fn step(&mut self, h: &Field) -> Result<Field> {
        self.check_field(h)?;
        let (mut x, mut a) = self.load(h.values());
        self.step_state(&mut x, &mut a, 0.0)?;
        Field::new(h.grid().clone(), x)
    }

    /// Flow map S_t for `t` a multiple of dt.
    pub fn advance(&mut self, h: &Field, t: f64) -> Result<Field> {
        self.check_field(h)?;
        let steps = self.steps_for(t)?;
        let (mut x, mut a) = self.load(h.values());
        for s in 0..steps {
            self.step_state(&mut x, &mut a, s as f64 * self.dt)?;
        }
        Field::new(h.grid().clone(), x)
    }

    /// Linear part of the discrete flow over time `t`: the same propagators
    /// as [`Stepper::advance`] with the nonlinearity switched off.
    pub fn linear(&self, h: &Field, t: f64) -> Result<Field> {
        self.check_field(h)?;
        let steps = self.steps_for(t)?;
        let asm = self.decomp.assembly();
        let (lo, hi) = asm.active_range();
        let (x, mut a) = self.load(h.values());
        let modal = self.decomp.synthesize(&a);
        let mut r: Vec<f64> = x.iter().zip(&modal).map(|(u, v)| u - v).collect();
        let mut buf = vec![0.0; x.len()];
        for _ in 0..steps {
            self.tail_full.apply(asm, &r, None, &mut buf);
            r[lo..=hi].copy_from_slice(&buf[lo..=hi]);
            for (aj, e) in a.iter_mut().zip(&self.e_full) {
                *aj *= e;
            }
        }
        let modal = self.decomp.synthesize(&a);
        let mut out: Vec<f64> = r.iter().zip(&modal).map(|(u, v)| u + v).collect();
        asm.close(&mut out);
        Field::new(h.grid().clone(), out)
    }

    /// `R(h) = S_t(h) − L_t h`.
    pub fn remainder(&mut self, h: &Field, t: f64) -> Result<Field> {
        let s = self.advance(h, t)?;
        let l = self.linear(h, t)?;
        s.sub(&l)
    }

    /// Evolve with snapshots every `every` time units.
    pub fn trajectory(&mut self, h0: &Field, horizon: f64, every: f64, eps_flag: f64) -> Result<TrajectoryRecord> {
        self.check_field(h0)?;
        let steps = self.steps_for(horizon)?;
        let stride = ((every / self.dt).round() as usize).max(1);
        let (mut x, mut a) = self.load(h0.values());
        let mut rec = TrajectoryRecord::default();
        self.record(&mut rec, 0.0, &x, eps_flag)?;
        for s in 0..steps {
            let t = s as f64 * self.dt;
            self.step_state(&mut x, &mut a, t)?;
            let t1 = (s + 1) as f64 * self.dt;
            let sup = x.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            if !sup.is_finite() {
                return Err(FdxError::NonFinite { time: t1 });
            }
            if sup > BLOW_UP {
                return Err(FdxError::BlowUp { time: t1, norm: sup });
            }
            if (s + 1) % stride == 0 || s + 1 == steps {
                self.record(&mut rec, t1, &x, eps_flag)?;
            }
        }
        Ok(rec)
    }

    fn record(&self, rec: &mut TrajectoryRecord, t: f64, x: &[f64], eps_flag: f64) -> Result<()> {
        rec.times.push(t);
        rec.norm_p1.push(self.decomp.norm(x));
        rec.norm_inf.push(x.iter().fold(0.0_f64, |m, v| m.max(v.abs())));
        rec.sup_v_grad.push(self.nl.sup_v_grad(x));
        rec.trunc_active.push(self.nl.truncation_active(x, eps_flag));
        rec.snapshots.push(Field::new(self.grid().clone(), x.to_vec())?);
        Ok(())
    }
}

/// Snapshots and norms of a computed trajectory.
#[derive(Debug, Clone, Default)]
pub struct TrajectoryRecord {
    pub times: Vec<f64>,
    pub snapshots: Vec<Field>,
    pub norm_p1: Vec<f64>,
    pub norm_inf: Vec<f64>,
    pub sup_v_grad: Vec<f64>,
    pub trunc_active: Vec<bool>,
}

impl TrajectoryRecord {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last(&self) -> Option<&Field> {
        self.snapshots.last()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["t", "norm_p1", "norm_inf", "sup_VgradH", "trunc_active"])?;
        for i in 0..self.len() {
            wr.write_record([
                fmt_f64(self.times[i]),
                fmt_f64(self.norm_p1[i]),
                fmt_f64(self.norm_inf[i]),
                fmt_f64(self.sup_v_grad[i]),
                (self.trunc_active[i] as u8).to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// One exponential step of the truncated flow.
pub fn step_truncated(
    h: &Field,
    dt: f64,
    cfg: &TruncationConfig,
    decomp: &Arc<SpectralDecomposition>,
) -> Result<Field> {
    cfg.validate()?;
    Stepper::new(decomp, Flow::Truncated { eps: cfg.eps }, dt)?.step(h)
}

/// S^ε_t with the default step.
pub fn time_t_map(
    h0: &Field,
    t: f64,
    cfg: &TruncationConfig,
    decomp: &Arc<SpectralDecomposition>,
) -> Result<Field> {
    cfg.validate()?;
    Stepper::new(decomp, Flow::Truncated { eps: cfg.eps }, DEFAULT_DT)?.advance(h0, t)
}

/// S^ε = S^ε_1.
pub fn time_one_map(
    h0: &Field,
    cfg: &TruncationConfig,
    decomp: &Arc<SpectralDecomposition>,
) -> Result<Field> {
    time_t_map(h0, 1.0, cfg, decomp)
}

/// R^ε(h0) = S^ε(h0) − e^{−L} h0.
pub fn remainder_r(
    h0: &Field,
    cfg: &TruncationConfig,
    decomp: &Arc<SpectralDecomposition>,
) -> Result<Field> {
    cfg.validate()?;
    Stepper::new(decomp, Flow::Truncated { eps: cfg.eps }, DEFAULT_DT)?.remainder(h0, 1.0)
}

#[derive(Debug, Clone)]
pub struct PicardSolution {
    pub record: TrajectoryRecord,
    pub sweeps: usize,
    /// Largest ratio of successive sweep increments.
    pub contraction: f64,
}

/// Fixed point of g ↦ h[g], where h solves ∂_t h + L h = M^ε[g], h(0) = h0,
/// by exact Duhamel quadrature of piecewise-linear forcing on the modes.
pub fn picard_solve(
    h0: &Field,
    cfg: &TruncationConfig,
    decomp: &Arc<SpectralDecomposition>,
    horizon: f64,
    tol: f64,
    dt: f64,
) -> Result<PicardSolution> {
    const MAX_SWEEPS: usize = 100;
    cfg.validate()?;
    if !(horizon > 0.0 && horizon <= 1.0) {
        return Err(FdxError::InvalidParameter(format!(
            "Picard horizon T = {horizon} must lie in (0, 1]"
        )));
    }
    let stepper = Stepper::new(decomp, Flow::Truncated { eps: cfg.eps }, dt)?;
    let steps = stepper.steps_for(horizon)?;
    let asm = decomp.assembly().clone();
    let k = decomp.k_max();
    let lam = decomp.lambdas().to_vec();
    let ez: Vec<f64> = lam.iter().map(|l| (-l * dt).exp()).collect();
    let w1: Vec<f64> = lam.iter().map(|l| dt * phi1(-l * dt)).collect();
    let w2: Vec<f64> = lam.iter().map(|l| dt * phi2(-l * dt)).collect();
    let mut nl = Nonlinearity::new(&asm);

    let (x0, a0) = stepper.load(h0.values());
    let n = x0.len();
    let mut g: Vec<Vec<f64>> = vec![x0.clone(); steps + 1];
    let mut prev_inc = f64::NAN;
    let mut contraction = 0.0_f64;
    let mut m_nodal = vec![vec![0.0; n]; steps + 1];
    let mut m_coef = vec![vec![0.0; k]; steps + 1];
    for sweep in 1..=MAX_SWEEPS {
        for s in 0..=steps {
            nl.eval_trunc(&g[s], cfg.eps, &mut m_nodal[s]);
            m_coef[s] = decomp.coefficients(&m_nodal[s], k);
        }
        let mut h = vec![x0.clone()];
        let mut a = a0.clone();
        let mut buf = vec![0.0; n];
        let mut corr = vec![0.0; k];
        for s in 0..steps {
            stepper
                .tail_full
                .apply(&asm, &h[s], Some(&m_nodal[s + 1]), &mut buf);
            for j in 0..k {
                let next = ez[j] * a[j]
                    + w1[j] * m_coef[s][j]
                    + w2[j] * (m_coef[s + 1][j] - m_coef[s][j]);
                corr[j] = next - (a[j] + dt * m_coef[s + 1][j]) * stepper.tail_full.modal[j];
                a[j] = next;
            }
            let (lo, hi) = asm.active_range();
            for (j, c) in corr.iter().enumerate() {
                for (o, v) in buf[lo..=hi].iter_mut().zip(&decomp.phi(j + 1)[lo..=hi]) {
                    *o += c * v;
                }
            }
            asm.close(&mut buf);
            h.push(buf.clone());
        }
        let inc = h
            .iter()
            .zip(&g)
            .map(|(u, v)| {
                let d: Vec<f64> = u.iter().zip(v).map(|(a, b)| a - b).collect();
                decomp.norm(&d)
            })
            .fold(0.0_f64, f64::max);
        if !inc.is_finite() {
            return Err(FdxError::NonFinite { time: horizon });
        }
        if prev_inc.is_finite() && prev_inc > 0.0 && sweep > 2 {
            contraction = contraction.max(inc / prev_inc);
        }
        prev_inc = inc;
        g = h;
        if inc <= tol {
            let mut record = TrajectoryRecord::default();
            for (s, x) in g.iter().enumerate() {
                stepper.record(&mut record, s as f64 * dt, x, cfg.eps)?;
            }
            return Ok(PicardSolution {
                record,
                sweeps: sweep,
                contraction,
            });
        }
    }
    Err(FdxError::NoConvergence {
        sweeps: MAX_SWEEPS,
        increment: prev_inc,
        contraction,
    })
}

/// Options shared by the trajectory drivers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvolveOptions {
    pub dt: f64,
    /// Snapshot cadence in time units.
    pub every: f64,
    /// Cutoff scale: drives the truncated flow and the `trunc_active` flag.
    pub eps: f64,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        Self {
            dt: DEFAULT_DT,
            every: 1.0 / 16.0,
            eps: 0.05,
        }
    }
}

/// Trajectory of the relative error, truncated or not.
pub fn solve_relative_error(
    h0: &Field,
    decomp: &Arc<SpectralDecomposition>,
    horizon: f64,
    truncated: bool,
    opts: &EvolveOptions,
) -> Result<TrajectoryRecord> {
    let flow = if truncated {
        Flow::Truncated { eps: opts.eps }
    } else {
        for (i, &v) in h0.values().iter().enumerate() {
            if !(1.0 + v > 0.0) {
                return Err(FdxError::OutOfAdmissibleRange { node: i, value: 1.0 + v });
            }
        }
        Flow::Untruncated
    };
    Stepper::new(decomp, flow, opts.dt)?.trajectory(h0, horizon, opts.every, opts.eps)
}

/// Rescaled flow (1/p)∂_t v^p − Δv = v^p through h = v/V − 1; the snapshots
/// hold v, the norms refer to h.
pub fn solve_rescaled_v(
    v0: &Field,
    decomp: &Arc<SpectralDecomposition>,
    horizon: f64,
    opts: &EvolveOptions,
) -> Result<TrajectoryRecord> {
    let asm = decomp.assembly();
    let vs = asm.v().values();
    let (lo, hi) = asm.active_range();
    let mut h = vec![0.0; vs.len()];
    for i in lo..=hi {
        if !(v0.values()[i] > 0.0) {
            return Err(FdxError::InvalidParameter(format!(
                "v0 must be positive at interior node {i}"
            )));
        }
        h[i] = v0.values()[i] / vs[i] - 1.0;
    }
    asm.close(&mut h);
    let h0 = Field::new(v0.grid().clone(), h)?;
    let mut rec = solve_relative_error(&h0, decomp, horizon, false, opts)?;
    for snap in rec.snapshots.iter_mut() {
        let v: Vec<f64> = snap
            .values()
            .iter()
            .zip(vs)
            .map(|(h, v)| v * (1.0 + h))
            .collect();
        *snap = Field::new(v0.grid().clone(), v)?;
    }
    Ok(rec)
}

/// Record of the extinction run for w_τ = Δ(w^m).
#[derive(Debug, Clone, Default)]
pub struct ExtinctionRecord {
    pub times: Vec<f64>,
    pub sup_norm: Vec<f64>,
    pub mass: Vec<f64>,
    pub snapshots: Vec<Field>,
    pub t_extinction: f64,
}

/// Sup-norm threshold that defines the extinction time.
pub const EXTINCTION_LEVEL: f64 = 1e-6;

/// Implicit Euler for ∂_τ w = Δ(w^m), m = 1/p, with zero Dirichlet data.
/// Each step solves u^p + dt (−Δ_h) u = w_n for u = w^m by Newton.
pub fn solve_original_w(
    w0: &Field,
    state: &StationaryState,
    dt: f64,
    snapshot_every: usize,
) -> Result<ExtinctionRecord> {
    const MAX_STEPS: usize = 10_000_000;
    let grid = state.grid().clone();
    let p = state.p();
    if w0.len() != grid.len() {
        return Err(FdxError::LengthMismatch {
            expected: grid.len(),
            got: w0.len(),
        });
    }
    if w0.values().iter().any(|&v| v < 0.0) || w0.norm_inf() == 0.0 {
        return Err(FdxError::InvalidParameter(
            "w0 must be nonnegative and not identically zero".into(),
        ));
    }
    if !(dt > 0.0) {
        return Err(FdxError::InvalidParameter(format!("dt = {dt} must be positive")));
    }
    let n = grid.len();
    let x = grid.x();
    let cw: Vec<f64> = (0..n).map(|i| grid.q()[i] * grid.mu()[i]).collect();
    let cond: Vec<f64> = (0..n - 1).map(|i| grid.mu_mid(i) / (x[i + 1] - x[i])).collect();
    let mass_of = |w: &[f64]| -> f64 { w.iter().zip(&cw).map(|(a, b)| a * b).sum() };

    let mut w: Vec<f64> = w0.values().to_vec();
    for i in 0..n {
        if grid.is_boundary(i) {
            w[i] = 0.0;
        }
    }
    let mut rec = ExtinctionRecord::default();
    let push = |rec: &mut ExtinctionRecord, t: f64, w: &[f64]| -> Result<()> {
        rec.times.push(t);
        rec.sup_norm.push(w.iter().fold(0.0_f64, |m, v| m.max(v.abs())));
        rec.mass.push(mass_of(w));
        rec.snapshots.push(Field::new(grid.clone(), w.to_vec())?);
        Ok(())
    };
    push(&mut rec, 0.0, &w)?;
    let m_exp = 1.0 / p;
    let mut u: Vec<f64> = w.iter().map(|v| v.max(0.0).powf(m_exp)).collect();
    let mut t = 0.0;
    for step in 1..=MAX_STEPS {
        newton_w_step(&mut u, &w, &cw, &cond, p, dt, &grid)?;
        for i in 0..n {
            w[i] = pos_pow(u[i].max(0.0), p);
        }
        t = step as f64 * dt;
        let sup = w.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if sup < EXTINCTION_LEVEL {
            push(&mut rec, t, &w)?;
            rec.t_extinction = t;
            return Ok(rec);
        }
        if snapshot_every > 0 && step % snapshot_every == 0 {
            push(&mut rec, t, &w)?;
        }
    }
    Err(FdxError::NonFinite { time: t })
}

fn newton_w_step(
    u: &mut [f64],
    w_prev: &[f64],
    cw: &[f64],
    cond: &[f64],
    p: f64,
    dt: f64,
    grid: &Grid,
) -> Result<()> {
    let n = u.len();
    let res = |u: &[f64], r: &mut [f64]| -> f64 {
        let mut worst = 0.0_f64;
        for i in 0..n {
            if grid.is_boundary(i) {
                r[i] = u[i];
                continue;
            }
            let mut ku = 0.0;
            if i + 1 < n {
                ku -= cond[i] * (u[i + 1] - u[i]);
            }
            if i > 0 {
                ku += cond[i - 1] * (u[i] - u[i - 1]);
            }
            r[i] = cw[i] * (pos_pow(u[i].max(0.0), p) - w_prev[i]) + dt * ku;
            worst = worst.max(r[i].abs() / grid.q()[i]);
        }
        worst
    };
    let scale = w_prev.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1e-300);
    let mut r = vec![0.0; n];
    let mut err = res(u, &mut r);
    for it in 0..60 {
        if err <= 1e-13 * scale {
            return Ok(());
        }
        let mut sub = vec![0.0; n - 1];
        let mut diag = vec![0.0; n];
        let mut sup = vec![0.0; n - 1];
        for i in 0..n {
            if grid.is_boundary(i) {
                diag[i] = 1.0;
                continue;
            }
            let mut d = cw[i] * p * pos_pow(u[i].max(0.0), p - 1.0);
            if i + 1 < n {
                d += dt * cond[i];
                sup[i] = -dt * cond[i];
            }
            if i > 0 {
                d += dt * cond[i - 1];
                sub[i - 1] = -dt * cond[i - 1];
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
                trial[i] = if grid.is_boundary(i) { 0.0 } else { u[i] + alpha * step[i] };
                if trial[i] < 0.0 {
                    ok = false;
                }
            }
            if ok || alpha < 1e-10 {
                break;
            }
            alpha *= 0.5;
        }
        for v in trial.iter_mut() {
            *v = v.max(0.0);
        }
        u.copy_from_slice(&trial);
        let new_err = res(u, &mut r);
        if !new_err.is_finite() {
            break;
        }
        if it > 40 && new_err >= err {
            break;
        }
        err = new_err;
    }
    if err <= 1e-9 * scale {
        Ok(())
    } else {
        Err(FdxError::NewtonStagnation {
            iterations: 60,
            residual: err,
        })
    }
}

/// v(t) recovered from w(τ) via w = ((1−m)(T−τ))^{1/(1−m)} v^{1/m}.
pub fn rescale_w(w: &Field, tau: f64, t_ext: f64, p: f64) -> Result<Field> {
    if !(tau < t_ext) {
        return Err(FdxError::InvalidParameter(format!(
            "rescaling needs tau = {tau} < T = {t_ext}"
        )));
    }
    let m = 1.0 / p;
    let amp = ((1.0 - m) * (t_ext - tau)).powf(1.0 / (1.0 - m));
    Ok(w.map(|v| (v.max(0.0) / amp).powf(m)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradBoundReport {
    /// sup over recorded t ≥ 1 of ‖V∇h(t)‖_∞.
    pub sup_v_grad_after_one: f64,
    pub eps: f64,
    pub holds: bool,
    /// sup_t ‖h(t)‖_∞ of the run: an amplitude observed to suffice.
    pub eps_star_empirical: f64,
}

/// Checks ‖V∇h(t)‖_∞ ≤ ε for t ≥ 1 along a recorded trajectory.
pub fn grad_bound_monitor(traj: &TrajectoryRecord, eps: f64) -> GradBoundReport {
    let mut sup = 0.0_f64;
    for (t, g) in traj.times.iter().zip(&traj.sup_v_grad) {
        if *t >= 1.0 - 1e-12 {
            sup = sup.max(*g);
        }
    }
    let amp = traj.norm_inf.iter().fold(0.0_f64, |m, v| m.max(*v));
    GradBoundReport {
        sup_v_grad_after_one: sup,
        eps,
        holds: sup <= eps,
        eps_star_empirical: amp,
    }
}

/// Least-squares decay rate of `y` against `t` on log scale, restricted to
/// the trailing `window` time units when given. Returns (rate, r²), where
/// rate is the negated slope.
pub fn fit_decay_rate(t: &[f64], y: &[f64], window: Option<f64>) -> Result<(f64, f64)> {
    if t.len() != y.len() {
        return Err(FdxError::LengthMismatch {
            expected: t.len(),
            got: y.len(),
        });
    }
    let start = match window {
        Some(w) => {
            let t_end = *t.last().unwrap_or(&0.0);
            t.iter().position(|&ti| ti >= t_end - w - 1e-12).unwrap_or(0)
        }
        None => 0,
    };
    let (ts, ys) = (&t[start..], &y[start..]);
    if ts.len() < 5 {
        return Err(FdxError::InvalidParameter(format!(
            "decay fit needs at least 5 points, got {}",
            ts.len()
        )));
    }
    if let Some(bad) = ys.iter().find(|v| !(**v > 0.0)) {
        return Err(FdxError::InvalidParameter(format!(
            "decay fit needs positive values, got {bad}"
        )));
    }
    let (slope, _, r2) = fit_log_linear(ts, ys)?;
    Ok((-slope, r2))
}

/// Least squares of ln y = a + b t; returns (b, a, r²).
pub(crate) fn fit_log_linear(ts: &[f64], ys: &[f64]) -> Result<(f64, f64, f64)> {
    if ts.len() < 2 || ys.iter().any(|v| !(*v > 0.0)) {
        return Err(FdxError::InvalidParameter(
            "log-linear fit needs two or more positive values".into(),
        ));
    }
    let ln: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let nf = ts.len() as f64;
    let tm = ts.iter().sum::<f64>() / nf;
    let lm = ln.iter().sum::<f64>() / nf;
    let sxx: f64 = ts.iter().map(|v| (v - tm) * (v - tm)).sum();
    let sxy: f64 = ts.iter().zip(&ln).map(|(a, b)| (a - tm) * (b - lm)).sum();
    let syy: f64 = ln.iter().map(|v| (v - lm) * (v - lm)).sum();
    let slope = sxy / sxx;
    let ss_res: f64 = ts
        .iter()
        .zip(&ln)
        .map(|(a, b)| {
            let e = b - (lm + slope * (a - tm));
            e * e
        })
        .sum();
    let r2 = if syy <= f64::EPSILON * f64::EPSILON * nf {
        1.0
    } else {
        1.0 - ss_res / syy
    };
    Ok((slope, lm - slope * tm, r2))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phi_functions_are_continuous_across_switch() {
        for z in [-1.1e-2_f64, -0.9e-2, 0.9e-2, 1.1e-2] {
            let exact = (z.exp_m1() - z) / (z * z);
            assert!((phi2(z) - exact).abs() < 1e-9);
        }
        assert!((phi1(1e-9) - 1.0).abs() < 1e-8);
    }

    #[test]
    fn decay_fit_on_exact_exponential() {
        let t: Vec<f64> = (0..50).map(|i| i as f64 * 0.1).collect();
        let y: Vec<f64> = t.iter().map(|t| (-2.0 * t).exp()).collect();
        let (rate, r2) = fit_decay_rate(&t, &y, None).unwrap();
        assert!((rate - 2.0).abs() < 1e-8);
        assert!((r2 - 1.0).abs() < 1e-12);
        let c = vec![3.0; 50];
        let (rate, _) = fit_decay_rate(&t, &c, None).unwrap();
        assert!(rate.abs() < 1e-8);
        assert!(fit_decay_rate(&t[..3], &y[..3], None).is_err());
        let mut bad = y.clone();
        bad[7] = 0.0;
        assert!(fit_decay_rate(&t, &bad, None).is_err());
    }
}
