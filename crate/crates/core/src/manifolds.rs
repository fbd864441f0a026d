//! Center manifold W_c^ε (graph of θ over E_c) from the bi-directed J map,
//! stable leaves M_g^ε from the forward I map, the foliation intersection
//! χ, and the shadow orbit on W_c^ε.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{FdxError, Result};
use crate::grid::{fmt_f64, Field};
use crate::nonlinearity::TruncationConfig;
use crate::operator::{GapParameters, SpectralDecomposition};
use crate::semiflow::{fit_log_linear, Flow, Stepper, TrajectoryRecord, DEFAULT_DT};

/// Iteration controls shared by the fixed-point constructions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ManifoldSettings {
    pub window_j: usize,
    pub window_i: usize,
    pub tol: f64,
    pub max_sweeps: usize,
    pub dt: f64,
}

impl Default for ManifoldSettings {
    fn default() -> Self {
        Self {
            window_j: 6,
            window_i: 10,
            tol: 1e-8,
            max_sweeps: 200,
            dt: DEFAULT_DT,
        }
    }
}

/// Increments below this multiple of ε_mach·⫼iterate⫼ are rounding noise.
const FLOOR_FACTOR: f64 = 64.0;

/// A finite window of an orbit sequence {h_k}, k_min ≤ k ≤ k_max.
#[derive(Debug, Clone)]
pub struct OrbitSequence {
    pub k_min: i64,
    pub k_max: i64,
    pub slices: Vec<Field>,
    pub gap: GapParameters,
    pub sweeps: usize,
    /// Largest ratio of successive increments above the rounding floor.
    pub contraction: f64,
    pub increment: f64,
}

impl OrbitSequence {
    pub fn get(&self, k: i64) -> &Field {
        &self.slices[(k - self.k_min) as usize]
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }
}

/// A point of the phase space split along E_c ⊕ E_s.
#[derive(Debug, Clone)]
pub struct ManifoldPoint {
    /// Coefficients on φ_1 … φ_K.
    pub center: Vec<f64>,
    pub stable: Field,
    pub point: Field,
}

/// ⫼h⫼ = max(‖P_c h‖, ‖P_s h‖) in L²_{p+1}.
pub fn trinorm(h: &Field, decomp: &SpectralDecomposition, k: usize) -> f64 {
    let c = decomp.coefficients(h.values(), k);
    let s = stable_part(decomp, h.values(), &c);
    c.iter().map(|v| v * v).sum::<f64>().sqrt().max(decomp.norm(&s))
}

fn stable_part(decomp: &SpectralDecomposition, h: &[f64], c: &[f64]) -> Vec<f64> {
    let mut s = h.to_vec();
    for (j, cj) in c.iter().enumerate() {
        for (o, v) in s.iter_mut().zip(decomp.phi(j + 1)) {
            *o -= cj * v;
        }
    }
    s
}

/// Fixed-point solver for θ, ψ_g and χ on one truncated semiflow.
#[derive(Debug, Clone)]
pub struct ManifoldSolver {
    decomp: Arc<SpectralDecomposition>,
    gap: GapParameters,
    cfg: TruncationConfig,
    settings: ManifoldSettings,
    stepper: Stepper,
    /// e^{λ_j}, j ≤ K: inverse of the linear time-one map on E_c.
    inv_center: Vec<f64>,
    s_evals: usize,
}

/// Report of the J/I sweep loop.
struct SweepStats {
    sweeps: usize,
    contraction: f64,
    increment: f64,
}

impl ManifoldSolver {
    pub fn new(
        decomp: &Arc<SpectralDecomposition>,
        gap: GapParameters,
        cfg: TruncationConfig,
        settings: ManifoldSettings,
    ) -> Result<Self> {
        cfg.validate()?;
        if settings.window_j < 5 {
            return Err(FdxError::InvalidParameter(format!(
                "J window M_w = {} must be at least 5",
                settings.window_j
            )));
        }
        if settings.window_i < 1 {
            return Err(FdxError::InvalidParameter(
                "I window must be at least 1".into(),
            ));
        }
        if !(settings.tol >= 0.0) || settings.max_sweeps == 0 {
            return Err(FdxError::InvalidParameter(format!(
                "tolerance {} and sweep limit {} must be nonnegative and positive",
                settings.tol, settings.max_sweeps
            )));
        }
        if gap.k == 0 || gap.k >= decomp.k_max() {
            return Err(FdxError::InvalidParameter(format!(
                "cut K = {} incompatible with k_max = {}",
                gap.k,
                decomp.k_max()
            )));
        }
        let inv_center = (1..=gap.k).map(|j| decomp.lambda(j).exp()).collect();
        Ok(Self {
            decomp: decomp.clone(),
            gap,
            cfg,
            settings,
            stepper: Stepper::new(decomp, Flow::Truncated { eps: cfg.eps }, settings.dt)?,
            inv_center,
            s_evals: 0,
        })
    }

    pub fn gap(&self) -> &GapParameters {
        &self.gap
    }

    pub fn settings(&self) -> &ManifoldSettings {
        &self.settings
    }

    pub fn decomp(&self) -> &Arc<SpectralDecomposition> {
        &self.decomp
    }

    pub fn cfg(&self) -> &TruncationConfig {
        &self.cfg
    }

    /// Number of time-one map evaluations performed so far.
    pub fn s_evals(&self) -> usize {
        self.s_evals
    }

    pub fn cut(&self) -> usize {
        self.gap.k
    }

    pub fn trinorm(&self, h: &[f64]) -> f64 {
        let c = self.decomp.coefficients(h, self.cut());
        let s = stable_part(&self.decomp, h, &c);
        c.iter().map(|v| v * v).sum::<f64>().sqrt().max(self.decomp.norm(&s))
    }

    pub fn center_coords(&self, h: &[f64]) -> Vec<f64> {
        self.decomp.coefficients(h, self.cut())
    }

    fn center_field(&self, coords: &[f64]) -> Vec<f64> {
        self.decomp.synthesize(coords)
    }

    fn field(&self, v: Vec<f64>) -> Field {
        Field::new(self.decomp.grid().clone(), v).expect("length matches the grid")
    }

    /// S^ε_t on raw nodal values.
    pub fn flow(&mut self, h: &[f64], t: f64) -> Result<Vec<f64>> {
        if h.iter().all(|v| *v == 0.0) {
            return Ok(vec![0.0; h.len()]);
        }
        self.s_evals += 1;
        let f = self.field(h.to_vec());
        Ok(self.stepper.advance(&f, t)?.into_values())
    }

    fn check_coords(&self, coords: &[f64]) -> Result<()> {
        if coords.len() != self.cut() {
            return Err(FdxError::LengthMismatch {
                expected: self.cut(),
                got: coords.len(),
            });
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(FdxError::InvalidParameter(
                "center coordinates must be finite".into(),
            ));
        }
        Ok(())
    }

    fn floor(&self, scale: f64) -> f64 {
        FLOOR_FACTOR * f64::EPSILON * scale
    }

    fn update_stats(&self, stats: &mut SweepStats, inc: f64, prev: f64, scale: f64) {
        stats.increment = inc;
        let noise = 1e3 * self.floor(scale);
        if prev > noise && inc > noise {
            stats.contraction = stats.contraction.max(inc / prev);
        }
    }

    /// Bi-directed weight of slice k: Λ_+^{−k} for k ≥ 0, Λ_−^{|k|} for k < 0.
    pub fn weight_j(&self, k: i64) -> f64 {
        if k >= 0 {
            self.gap.big_lambda_plus.powi(-(k as i32))
        } else {
            self.gap.big_lambda_minus.powi((-k) as i32)
        }
    }

    /// Forward weight of slice k: Λ_−^{−k}.
    pub fn weight_i(&self, k: i64) -> f64 {
        self.gap.big_lambda_minus.powi(-(k as i32))
    }

    /// Fixed point of J(h_c, ·) on the window [−M_w, M_w], seeded at zero.
    pub fn iterate_j(&mut self, coords: &[f64]) -> Result<OrbitSequence> {
        self.check_coords(coords)?;
        let m = self.settings.window_j as i64;
        let n = self.decomp.grid().len();
        let kk = self.cut();
        let hc = self.center_field(coords);
        let hc_norm = self.trinorm(&hc);
        let guard = 10.0 * hc_norm;
        let idx = |k: i64| (k + m) as usize;
        let mut seq = vec![vec![0.0; n]; (2 * m + 1) as usize];
        let mut stats = SweepStats {
            sweeps: 0,
            contraction: 0.0,
            increment: f64::INFINITY,
        };
        let mut prev = f64::NAN;
        // S(h_k) is recomputed only when h_k changed
        let mut cache: Vec<Option<(Vec<f64>, Vec<f64>)>> = vec![None; (2 * m) as usize];
        for sweep in 1..=self.settings.max_sweeps {
            stats.sweeps = sweep;
            let mut images = Vec::with_capacity((2 * m) as usize);
            for k in -m..m {
                let i = idx(k);
                let hit = matches!(&cache[i], Some((inp, _)) if *inp == seq[i]);
                if !hit {
                    let out = self.flow(&seq[i], 1.0)?;
                    cache[i] = Some((seq[i].clone(), out));
                }
                images.push(cache[i].as_ref().map(|c| c.1.clone()).unwrap_or_default());
            }
            let image = |k: i64| -> &[f64] { &images[(k + m) as usize] };
            let mut next = vec![vec![0.0; n]; seq.len()];
            for k in 1..=m {
                next[idx(k)] = image(k - 1).to_vec();
            }
            // k = 0: P_s S(h_{−1}) + h_c
            {
                let s = image(-1);
                let cs = self.center_coords(s);
                let mut v = stable_part(&self.decomp, s, &cs);
                for (o, c) in v.iter_mut().zip(&hc) {
                    *o += c;
                }
                next[idx(0)] = v;
            }
            // k ≤ −1: P_s S(h_{k−1}) + L_c^{−1} P_c(h_{k+1} − R(h_k)); h_{−M−1} = 0
            for k in -m..=-1 {
                let mut v = if k - 1 < -m {
                    vec![0.0; n]
                } else {
                    let s = image(k - 1);
                    let cs = self.center_coords(s);
                    stable_part(&self.decomp, s, &cs)
                };
                let c_up = self.center_coords(&seq[idx(k + 1)]);
                let c_img = self.center_coords(image(k));
                let c_here = self.center_coords(&seq[idx(k)]);
                let c_new: Vec<f64> = (0..kk)
                    .map(|j| self.inv_center[j] * (c_up[j] - c_img[j]) + c_here[j])
                    .collect();
                for (j, c) in c_new.iter().enumerate() {
                    for (o, ph) in v.iter_mut().zip(self.decomp.phi(j + 1)) {
                        *o += c * ph;
                    }
                }
                next[idx(k)] = v;
            }
            let mut inc = 0.0_f64;
            let mut norm = 0.0_f64;
            for k in -m..=m {
                let w = self.weight_j(k);
                let d: Vec<f64> = next[idx(k)]
                    .iter()
                    .zip(&seq[idx(k)])
                    .map(|(a, b)| a - b)
                    .collect();
                inc = inc.max(w * self.trinorm(&d));
                norm = norm.max(w * self.trinorm(&next[idx(k)]));
            }
            if !inc.is_finite() || !norm.is_finite() {
                return Err(FdxError::NonFinite { time: sweep as f64 });
            }
            if norm > guard && norm > self.floor(1.0) {
                return Err(FdxError::Divergence { norm, guard });
            }
            self.update_stats(&mut stats, inc, prev, norm);
            prev = inc;
            seq = next;
            if inc <= self.settings.tol || inc <= self.floor(norm) {
                return Ok(OrbitSequence {
                    k_min: -m,
                    k_max: m,
                    slices: seq.into_iter().map(|v| self.field(v)).collect(),
                    gap: self.gap,
                    sweeps: stats.sweeps,
                    contraction: stats.contraction,
                    increment: inc,
                });
            }
        }
        Err(FdxError::NoConvergence {
            sweeps: self.settings.max_sweeps,
            increment: stats.increment,
            contraction: stats.contraction,
        })
    }

    /// θ(h_c) = P_s Θ_0(h_c).
    pub fn theta(&mut self, coords: &[f64]) -> Result<Field> {
        let seq = self.iterate_j(coords)?;
        let h0 = seq.get(0).values();
        let c = self.center_coords(h0);
        Ok(self.field(stable_part(&self.decomp, h0, &c)))
    }

    /// The point h_c + θ(h_c) of W_c^ε.
    pub fn center_point(&mut self, coords: &[f64]) -> Result<ManifoldPoint> {
        let stable = self.theta(coords)?;
        let mut point = self.center_field(coords);
        for (o, s) in point.iter_mut().zip(stable.values()) {
            *o += s;
        }
        Ok(ManifoldPoint {
            center: coords.to_vec(),
            stable,
            point: self.field(point),
        })
    }

    /// max ‖P_s S^ε_t(z) − θ(P_c S^ε_t(z))‖ over points z = h_c + θ(h_c).
    pub fn invariance_check(&mut self, points: &[Vec<f64>], t: f64) -> Result<f64> {
        Ok(self.invariance_deviations(points, &[t])?[0])
    }

    /// As `invariance_check`, for several times at once.
    pub fn invariance_deviations(&mut self, points: &[Vec<f64>], times: &[f64]) -> Result<Vec<f64>> {
        let mut worst = vec![0.0_f64; times.len()];
        for coords in points {
            let z = self.center_point(coords)?;
            for (w, &t) in worst.iter_mut().zip(times) {
                let img = self.flow(z.point.values(), t)?;
                let c = self.center_coords(&img);
                let s = stable_part(&self.decomp, &img, &c);
                let th = self.theta(&c)?;
                let d: Vec<f64> = s.iter().zip(th.values()).map(|(a, b)| a - b).collect();
                *w = w.max(self.decomp.norm(&d));
            }
        }
        Ok(worst)
    }

    /// Base orbit S^i(g), i = 0 … M_w + 1.
    pub fn base_orbit(&mut self, g: &Field) -> Result<Vec<Vec<f64>>> {
        let mut orbit = vec![g.values().to_vec()];
        for i in 0..=self.settings.window_i {
            let next = self.flow(&orbit[i], 1.0)?;
            orbit.push(next);
        }
        Ok(orbit)
    }

    /// Fixed point of the shifted I map for the leaf through g, relative
    /// datum `g_s ∈ E_s`, on the window [0, M_w].
    pub fn iterate_i(&mut self, g: &Field, g_s: &Field) -> Result<OrbitSequence> {
        let base = self.base_orbit(g)?;
        self.iterate_i_with(&base, g_s)
    }

    pub fn iterate_i_with(&mut self, base: &[Vec<f64>], g_s: &Field) -> Result<OrbitSequence> {
        let m = self.settings.window_i;
        if base.len() != m + 2 {
            return Err(FdxError::LengthMismatch {
                expected: m + 2,
                got: base.len(),
            });
        }
        let n = self.decomp.grid().len();
        if g_s.len() != n {
            return Err(FdxError::LengthMismatch {
                expected: n,
                got: g_s.len(),
            });
        }
        let kk = self.cut();
        let cs = self.center_coords(g_s.values());
        let cn = cs.iter().map(|v| v * v).sum::<f64>().sqrt();
        let gs_norm = self.trinorm(g_s.values());
        if cn > 1e-10 * (1.0 + gs_norm) {
            return Err(FdxError::InvalidParameter(format!(
                "g_s has a center component of norm {cn:e}; expected an element of E_s"
            )));
        }
        // T_i subtracts base slices, so rounding scales with the base orbit
        let base_scale = (0..=m)
            .map(|k| self.weight_i(k as i64) * self.trinorm(&base[k]).max(self.trinorm(&base[k + 1])))
            .fold(0.0_f64, f64::max);
        let mut seq = vec![vec![0.0; n]; m + 1];
        let mut stats = SweepStats {
            sweeps: 0,
            contraction: 0.0,
            increment: f64::INFINITY,
        };
        let mut prev = f64::NAN;
        let mut cache: Vec<Option<(Vec<f64>, Vec<f64>)>> = vec![None; m + 1];
        for sweep in 1..=self.settings.max_sweeps {
            stats.sweeps = sweep;
            // T_i = S(h_i + G_i) − G_{i+1}
            let mut t_img = Vec::with_capacity(m + 1);
            for i in 0..=m {
                let hit = matches!(&cache[i], Some((inp, _)) if *inp == seq[i]);
                if !hit {
                    let out = if seq[i].iter().all(|v| *v == 0.0) {
                        vec![0.0; n]
                    } else {
                        let arg: Vec<f64> = seq[i].iter().zip(&base[i]).map(|(a, b)| a + b).collect();
                        let s = self.flow(&arg, 1.0)?;
                        s.iter().zip(&base[i + 1]).map(|(a, b)| a - b).collect()
                    };
                    cache[i] = Some((seq[i].clone(), out));
                }
                t_img.push(cache[i].as_ref().map(|c| c.1.clone()).unwrap_or_default());
            }
            let mut next = vec![vec![0.0; n]; m + 1];
            for k in 0..=m {
                let mut v = if k == 0 {
                    g_s.values().to_vec()
                } else {
                    let c = self.center_coords(&t_img[k - 1]);
                    stable_part(&self.decomp, &t_img[k - 1], &c)
                };
                let c_up = if k < m {
                    self.center_coords(&seq[k + 1])
                } else {
                    vec![0.0; kk]
                };
                let c_img = self.center_coords(&t_img[k]);
                let c_here = self.center_coords(&seq[k]);
                for j in 0..kk {
                    let c = self.inv_center[j] * (c_up[j] - c_img[j]) + c_here[j];
                    for (o, ph) in v.iter_mut().zip(self.decomp.phi(j + 1)) {
                        *o += c * ph;
                    }
                }
                next[k] = v;
            }
            let mut inc = 0.0_f64;
            let mut norm = 0.0_f64;
            for k in 0..=m {
                let w = self.weight_i(k as i64);
                let d: Vec<f64> = next[k].iter().zip(&seq[k]).map(|(a, b)| a - b).collect();
                inc = inc.max(w * self.trinorm(&d));
                norm = norm.max(w * self.trinorm(&next[k]));
            }
            if !inc.is_finite() {
                return Err(FdxError::NonFinite { time: sweep as f64 });
            }
            let guard = 10.0 * gs_norm;
            if norm > guard && norm > self.floor(1.0) {
                return Err(FdxError::Divergence { norm, guard });
            }
            let scale = norm.max(base_scale);
            self.update_stats(&mut stats, inc, prev, scale);
            prev = inc;
            seq = next;
            if inc <= self.settings.tol || inc <= self.floor(scale) {
                return Ok(OrbitSequence {
                    k_min: 0,
                    k_max: m as i64,
                    slices: seq.into_iter().map(|v| self.field(v)).collect(),
                    gap: self.gap,
                    sweeps: stats.sweeps,
                    contraction: stats.contraction,
                    increment: inc,
                });
            }
        }
        Err(FdxError::NoConvergence {
            sweeps: self.settings.max_sweeps,
            increment: stats.increment,
            contraction: stats.contraction,
        })
    }

    /// ψ_g(g_s) = P_c of the zero slice of the I fixed point.
    pub fn psi(&mut self, g: &Field, g_s: &Field) -> Result<Field> {
        let seq = self.iterate_i(g, g_s)?;
        let c = self.center_coords(seq.get(0).values());
        Ok(self.field(self.center_field(&c)))
    }

    fn psi_with(&mut self, base: &[Vec<f64>], g_s: &[f64]) -> Result<Vec<f64>> {
        let gs = self.field(g_s.to_vec());
        let seq = self.iterate_i_with(base, &gs)?;
        Ok(self.center_coords(seq.get(0).values()))
    }

    /// Weighted forward distance sup_k Λ_−^{−k}⫼S^k(g) − S^k(g̃)⫼, k ≤ M_w.
    pub fn leaf_distance(&mut self, g: &Field, g_tilde: &Field) -> Result<Vec<f64>> {
        let mut a = g.values().to_vec();
        let mut b = g_tilde.values().to_vec();
        let mut out = Vec::new();
        for k in 0..=self.settings.window_i {
            let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
            out.push(self.weight_i(k as i64) * self.trinorm(&d));
            if k < self.settings.window_i {
                a = self.flow(&a, 1.0)?;
                b = self.flow(&b, 1.0)?;
            }
        }
        Ok(out)
    }

    /// ⫼{h_k}⫼_{Λ−,Λ+} for a J sequence, ⫼{h_k}⫼_{Λ−} for an I sequence.
    pub fn sequence_norm(&self, seq: &OrbitSequence) -> f64 {
        (seq.k_min..=seq.k_max)
            .map(|k| {
                let w = if seq.k_min < 0 { self.weight_j(k) } else { self.weight_i(k) };
                w * self.trinorm(seq.get(k).values())
            })
            .fold(0.0_f64, f64::max)
    }

    /// (k, ⫼S(h_{k−1}) − h_k⫼, ⫼h_k⫼) for k_min < k ≤ k_max.
    pub fn orbit_defects(&mut self, seq: &OrbitSequence) -> Result<Vec<(i64, f64, f64)>> {
        let mut out = Vec::new();
        for k in seq.k_min + 1..=seq.k_max {
            let s = self.flow(seq.get(k - 1).values(), 1.0)?;
            let d: Vec<f64> = s.iter().zip(seq.get(k).values()).map(|(a, b)| a - b).collect();
            out.push((k, self.trinorm(&d), self.trinorm(seq.get(k).values())));
        }
        Ok(out)
    }

    /// max ⫼S(h_{k−1}) − h_k⫼ over k_min < k ≤ k_max.
    pub fn orbit_defect(&mut self, seq: &OrbitSequence) -> Result<f64> {
        Ok(self.orbit_defects(seq)?.iter().fold(0.0_f64, |m, d| m.max(d.1)))
    }

    /// Splits `g` and precomputes its base orbit for repeated χ evaluations.
    pub fn leaf(&mut self, g: &Field) -> Result<Leaf> {
        let base = self.base_orbit(g)?;
        let gc = self.center_coords(g.values());
        let gs = stable_part(&self.decomp, g.values(), &gc);
        Ok(Leaf { base, gc, gs })
    }

    /// ψ_g(g_s) in center coordinates for a prepared leaf.
    pub fn psi_leaf(&mut self, leaf: &Leaf, g_s: &[f64]) -> Result<Vec<f64>> {
        self.psi_with(&leaf.base, g_s)
    }

    /// The member g + z_0 of M_g whose stable offset is `g_s`.
    pub fn member(&mut self, leaf: &Leaf, g_s: &Field) -> Result<Field> {
        let seq = self.iterate_i_with(&leaf.base, g_s)?;
        let v = leaf.base[0]
            .iter()
            .zip(seq.get(0).values())
            .map(|(a, b)| a + b)
            .collect();
        Ok(self.field(v))
    }

    /// Stable projection of a nodal vector.
    pub fn stable_projection(&self, h: &[f64]) -> Vec<f64> {
        let c = self.center_coords(h);
        stable_part(&self.decomp, h, &c)
    }

    /// χ(q_s) = θ(ψ_g(q_s − P_s g) + P_c g) with its intermediate values.
    pub fn chi(&mut self, leaf: &Leaf, q_s: &[f64]) -> Result<ChiSample> {
        let rel: Vec<f64> = q_s.iter().zip(&leaf.gs).map(|(a, b)| a - b).collect();
        let psi_c = self.psi_with(&leaf.base, &rel)?;
        let q_c: Vec<f64> = psi_c.iter().zip(&leaf.gc).map(|(a, b)| a + b).collect();
        let th = self.theta(&q_c)?;
        Ok(ChiSample {
            q_s: self.field(q_s.to_vec()),
            psi: psi_c,
            q_c,
            chi: th,
        })
    }

    /// Unique point of M_g^ε ∩ W_c^ε by iterating
    /// χ(q_s) = θ(ψ_g(q_s − P_s g) + P_c g) from q_s = P_s g.
    pub fn foliation_intersect(&mut self, g: &Field) -> Result<Intersection> {
        const MAX_ITER: usize = 100;
        let leaf = self.leaf(g)?;
        let mut q_s = leaf.gs.clone();
        let mut lip = 0.0_f64;
        let mut samples: Vec<ChiSample> = Vec::new();
        for it in 1..=MAX_ITER {
            let sample = self.chi(&leaf, &q_s)?;
            let th = sample.chi.values().to_vec();
            if let Some(prev) = samples.last() {
                let dq: Vec<f64> = q_s.iter().zip(prev.q_s.values()).map(|(a, b)| a - b).collect();
                let dchi: Vec<f64> = th.iter().zip(prev.chi.values()).map(|(a, b)| a - b).collect();
                let den = self.trinorm(&dq);
                if den > 1e3 * self.floor(self.trinorm(&q_s)) {
                    lip = lip.max(self.trinorm(&dchi) / den);
                }
            }
            if lip >= 1.0 {
                return Err(FdxError::NotContraction { lip });
            }
            let d: Vec<f64> = th.iter().zip(&q_s).map(|(a, b)| a - b).collect();
            let step = self.trinorm(&d);
            let scale = self.trinorm(&th).max(self.trinorm(&q_s));
            let done = step <= self.settings.tol || step <= self.floor(scale);
            let q_c = sample.q_c.clone();
            samples.push(sample);
            q_s = th;
            if done {
                let stable = self.field(q_s.clone());
                let mut point = self.center_field(&q_c);
                for (o, s) in point.iter_mut().zip(&q_s) {
                    *o += s;
                }
                return Ok(Intersection {
                    point: ManifoldPoint {
                        center: q_c,
                        stable,
                        point: self.field(point),
                    },
                    iterations: it,
                    lip_chi: lip,
                    step,
                    samples,
                });
            }
        }
        Err(FdxError::NoConvergence {
            sweeps: MAX_ITER,
            increment: f64::NAN,
            contraction: lip,
        })
    }
    /// Evolves the intersection point of the leaf through h(t_0) and
    /// compares it with the recorded trajectory on [t_0, t_0 + span].
    pub fn finite_dim_approx(&mut self, traj: &TrajectoryRecord, span: f64) -> Result<ShadowReport> {
        let eps = self.cfg.eps;
        let start = (0..traj.len())
            .find(|&i| traj.norm_inf[i] <= eps && traj.sup_v_grad[i] <= eps)
            .ok_or(FdxError::SmallnessNeverMet { eps })?;
        let t0 = traj.times[start];
        let end = traj
            .times
            .iter()
            .rposition(|&t| t <= t0 + span + 1e-9)
            .unwrap_or(start);
        if traj.times[end] < t0 + span - 1e-9 {
            return Err(FdxError::InvalidParameter(format!(
                "trajectory ends at t = {} before t0 + span = {}",
                traj.times[end],
                t0 + span
            )));
        }
        if let Some(i) = (start..=end).find(|&i| traj.norm_inf[i] > eps || traj.sup_v_grad[i] > eps) {
            return Err(FdxError::InvalidParameter(format!(
                "trajectory leaves the smallness regime at t = {}",
                traj.times[i]
            )));
        }
        let g = traj.snapshots[start].clone();
        let inter = self.foliation_intersect(&g)?;
        let mut shadow = inter.point.point.values().to_vec();
        let mut times = Vec::new();
        let mut diffs = Vec::new();
        let mut t_prev = t0;
        for i in start..=end {
            let t = traj.times[i];
            if t > t_prev {
                shadow = self.flow(&shadow, t - t_prev)?;
                t_prev = t;
            }
            let d: Vec<f64> = traj.snapshots[i]
                .values()
                .iter()
                .zip(&shadow)
                .map(|(a, b)| a - b)
                .collect();
            times.push(t);
            diffs.push(self.decomp.norm(&d));
        }
        let (slope, intercept, r2) = fit_log_linear(&times, &diffs)?;
        let prefactor = (intercept + slope * t0).exp();
        Ok(ShadowReport {
            t0,
            lambda_minus: self.gap.lambda_minus,
            fitted_rate: -slope,
            prefactor,
            r2,
            window: self.settings.window_i,
            tol: self.settings.tol,
            times,
            diffs,
            lip_chi: inter.lip_chi,
            intersection_iterations: inter.iterations,
        })
    }

    /// Long-format dump of θ at every `stride`-th node for the given
    /// center coordinates: sample, c_1..c_K, x, theta.
    pub fn write_manifold_csv<W: Write>(&mut self, samples: &[Vec<f64>], stride: usize, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["sample".to_string()];
        header.extend((1..=self.cut()).map(|j| format!("c_{j}")));
        header.push("x".into());
        header.push("theta".into());
        wr.write_record(&header)?;
        let x = self.decomp.grid().x().to_vec();
        for (s, coords) in samples.iter().enumerate() {
            let th = self.theta(coords)?;
            for i in (0..x.len()).step_by(stride.max(1)) {
                let mut row = vec![s.to_string()];
                row.extend(coords.iter().map(|c| fmt_f64(*c)));
                row.push(fmt_f64(x[i]));
                row.push(fmt_f64(th.values()[i]));
                wr.write_record(&row)?;
            }
        }
        wr.flush()?;
        Ok(())
    }
}

/// Base orbit and E_c ⊕ E_s split of a leaf base point g.
#[derive(Debug, Clone)]
pub struct Leaf {
    base: Vec<Vec<f64>>,
    gc: Vec<f64>,
    gs: Vec<f64>,
}

impl Leaf {
    /// P_s g.
    pub fn stable(&self) -> &[f64] {
        &self.gs
    }

    /// Center coordinates of g.
    pub fn center(&self) -> &[f64] {
        &self.gc
    }
}

/// One evaluation of χ with its intermediate values.
#[derive(Debug, Clone)]
pub struct ChiSample {
    pub q_s: Field,
    /// ψ_g(q_s − P_s g) in center coordinates.
    pub psi: Vec<f64>,
    /// ψ_g(q_s − P_s g) + P_c g.
    pub q_c: Vec<f64>,
    pub chi: Field,
}

#[derive(Debug, Clone)]
pub struct Intersection {
    pub point: ManifoldPoint,
    pub iterations: usize,
    pub lip_chi: f64,
    pub step: f64,
    pub samples: Vec<ChiSample>,
}

/// Shadowing summary; `times`/`diffs` are the compared series.
#[derive(Debug, Clone, Serialize)]
pub struct ShadowReport {
    pub t0: f64,
    pub lambda_minus: f64,
    pub fitted_rate: f64,
    pub prefactor: f64,
    pub r2: f64,
    pub window: usize,
    pub tol: f64,
    #[serde(skip)]
    pub times: Vec<f64>,
    #[serde(skip)]
    pub diffs: Vec<f64>,
    #[serde(skip)]
    pub lip_chi: f64,
    #[serde(skip)]
    pub intersection_iterations: usize,
}
