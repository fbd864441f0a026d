//! The weighted operator L h = −V^{−1−p} div(V²∇h) − (p−1)h, its spectrum,
//! spectral projections, split semigroups and the gap ladder.

use std::io::Write;
use std::sync::Arc;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{FdxError, Result};
use crate::grid::{fmt_f64, DomainKind, Field, Grid};
use crate::stationary::{pos_pow, StationaryState};
use crate::tridiag::{pencil_count_below, TridiagonalLu};

/// Minimal admissible gap between the last center and first stable level.
pub const MIN_GAP: f64 = 1e-6;

/// Stiffness and mass forms of the divergence-form discretization.
///
/// The stiffness form is the weighted graph Laplacian with edge weights
/// `μ_{i+1/2} V_{i+1/2}² / (x_{i+1} − x_i)`, so constants lie in its kernel.
/// The mass form is `diag(q μ V^{p+1})`.
#[derive(Debug, Clone)]
pub struct OperatorAssembly {
    grid: Arc<Grid>,
    p: f64,
    v: Field,
    edge: Vec<f64>,
    mass: Vec<f64>,
    /// Contiguous index range of nodes carrying positive mass.
    lo: usize,
    hi: usize,
}

pub fn assemble(state: &StationaryState) -> Result<OperatorAssembly> {
    state.verify()?;
    let grid = state.grid().clone();
    let p = state.p();
    let v = state.v().values();
    let x = grid.x();
    let n = grid.len();
    let mass: Vec<f64> = (0..n)
        .map(|i| grid.q()[i] * grid.mu()[i] * pos_pow(v[i].max(0.0), p + 1.0))
        .collect();
    let active: Vec<usize> = (0..n).filter(|&i| mass[i] > 0.0).collect();
    let lo = *active.first().ok_or_else(|| {
        FdxError::UnsolvedState("stationary profile has no positive-mass node".into())
    })?;
    let hi = *active.last().unwrap();
    if active.len() != hi - lo + 1 {
        return Err(FdxError::UnsolvedState(
            "positive-mass nodes do not form a contiguous range".into(),
        ));
    }
    let mut edge = vec![0.0; n - 1];
    for i in 0..n - 1 {
        // edges to massless nodes are condensed out by the closure
        if i < lo || i + 1 > hi {
            continue;
        }
        let vm = (v[i] * v[i + 1]).sqrt();
        edge[i] = grid.mu_mid(i) * vm * vm / (x[i + 1] - x[i]);
    }
    Ok(OperatorAssembly {
        grid,
        p,
        v: state.v().clone(),
        edge,
        mass,
        lo,
        hi,
    })
}

impl OperatorAssembly {
    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn v(&self) -> &Field {
        &self.v
    }

    /// Edge weights; `edge()[i]` couples nodes `i` and `i + 1`.
    pub fn edge(&self) -> &[f64] {
        &self.edge
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn active_range(&self) -> (usize, usize) {
        (self.lo, self.hi)
    }

    pub fn shift(&self) -> f64 {
        self.p - 1.0
    }

    /// `(A h)_i` on all nodes (zero where no edge is attached).
    pub fn apply_stiffness(&self, h: &[f64], out: &mut [f64]) {
        let n = h.len();
        out.iter_mut().for_each(|o| *o = 0.0);
        for i in 0..n - 1 {
            let w = self.edge[i];
            if w == 0.0 {
                continue;
            }
            let flux = w * (h[i + 1] - h[i]);
            out[i] -= flux;
            out[i + 1] += flux;
        }
    }

    /// Bilinear stiffness form `A[u, v]`.
    pub fn stiffness_form(&self, u: &[f64], v: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..u.len() - 1 {
            s += self.edge[i] * ((u[i + 1] - u[i]) * (v[i + 1] - v[i]));
        }
        s
    }

    /// Fill the values at massless nodes from the interior: the ball center
    /// copies its neighbour, Dirichlet nodes use linear extrapolation.
    pub fn close(&self, h: &mut [f64]) {
        let n = h.len();
        let (lo, hi) = (self.lo, self.hi);
        for i in 0..lo {
            h[i] = match self.grid.kind() {
                DomainKind::RadialBall => h[lo],
                DomainKind::Interval => extrapolate(self.grid.x(), h, lo, lo + 1, i),
            };
        }
        for i in hi + 1..n {
            h[i] = extrapolate(self.grid.x(), h, hi, hi - 1, i);
        }
    }

    /// L h at positive-mass nodes, closed at the others.
    pub fn apply_l(&self, h: &Field) -> Result<Field> {
        if h.len() != self.grid.len() {
            return Err(FdxError::LengthMismatch {
                expected: self.grid.len(),
                got: h.len(),
            });
        }
        let mut out = vec![0.0; h.len()];
        self.apply_stiffness(h.values(), &mut out);
        let s = self.shift();
        for i in self.lo..=self.hi {
            out[i] = out[i] / self.mass[i] - s * h.values()[i];
        }
        self.close(&mut out);
        Field::new(self.grid.clone(), out)
    }

    /// ⟨u, v⟩ in L²_{p+1}, i.e. the mass form.
    pub fn inner(&self, u: &[f64], v: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in self.lo..=self.hi {
            s += self.mass[i] * (u[i] * v[i]);
        }
        s
    }

    pub fn norm(&self, u: &[f64]) -> f64 {
        self.inner(u, u).max(0.0).sqrt()
    }
}

fn extrapolate(x: &[f64], h: &[f64], a: usize, b: usize, at: usize) -> f64 {
    h[a] + (h[b] - h[a]) * (x[at] - x[a]) / (x[b] - x[a])
}

/// Lowest `k_max` eigenpairs of L, eigenfields orthonormal in L²_{p+1}.
#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    assembly: Arc<OperatorAssembly>,
    lambda: Vec<f64>,
    phi: Vec<Vec<f64>>,
    /// `mass ⊙ φ_k`, so that coefficients are plain dot products.
    mphi: Vec<Vec<f64>>,
    residual: Vec<f64>,
}

pub fn eigen(assembly: &Arc<OperatorAssembly>, k_max: usize) -> Result<SpectralDecomposition> {
    let (lo, hi) = assembly.active_range();
    let m = hi - lo + 1;
    let n = assembly.grid.len();
    if k_max == 0 || k_max + 2 > n || k_max > m {
        return Err(FdxError::InvalidParameter(format!(
            "k_max = {k_max} out of range (need 1 <= k_max <= n - 2 = {})",
            n.saturating_sub(2).min(m)
        )));
    }
    let b: Vec<f64> = assembly.mass[lo..=hi].to_vec();
    let off: Vec<f64> = (lo..hi).map(|i| -assembly.edge[i]).collect();
    let diag: Vec<f64> = (lo..=hi)
        .map(|i| {
            let left = if i > lo { assembly.edge[i - 1] } else { 0.0 };
            let right = if i < hi { assembly.edge[i] } else { 0.0 };
            left + right
        })
        .collect();

    // Gershgorin bound for the pencil, scaled row by row by the mass
    let upper = (0..m)
        .map(|i| {
            let o = if i > 0 { off[i - 1].abs() } else { 0.0 }
                + if i + 1 < m { off[i].abs() } else { 0.0 };
            (diag[i] + o) / b[i]
        })
        .fold(0.0_f64, f64::max);

    let mut lambda = Vec::with_capacity(k_max);
    let mut phi: Vec<Vec<f64>> = Vec::with_capacity(k_max);
    let mut mphi = Vec::with_capacity(k_max);
    let mut residual = Vec::with_capacity(k_max);
    for k in 0..k_max {
        let nu0 = bisect_level(&diag, &off, &b, k, upper);
        let mut y = inverse_iteration(&diag, &off, &b, nu0, k)?;
        for prev in &phi {
            let prev_active = &prev[lo..=hi];
            let c: f64 = (0..m).map(|i| b[i] * y[i] * prev_active[i]).sum();
            for i in 0..m {
                y[i] -= c * prev_active[i];
            }
        }
        let nrm = (0..m).map(|i| b[i] * y[i] * y[i]).sum::<f64>().sqrt();
        y.iter_mut().for_each(|v| *v /= nrm);
        if y[0] < 0.0 {
            y.iter_mut().for_each(|v| *v = -*v);
        }
        // Rayleigh quotient in differences form keeps small levels accurate
        let nu: f64 = (0..m - 1)
            .map(|i| -off[i] * (y[i + 1] - y[i]) * (y[i + 1] - y[i]))
            .sum();
        let mut r2 = 0.0;
        for i in 0..m {
            let mut ay = diag[i] * y[i];
            if i > 0 {
                ay += off[i - 1] * y[i - 1];
            }
            if i + 1 < m {
                ay += off[i] * y[i + 1];
            }
            let ri = ay - nu * b[i] * y[i];
            r2 += ri * ri / b[i];
        }
        let mut full = vec![0.0; n];
        full[lo..=hi].copy_from_slice(&y);
        assembly.close(&mut full);
        let mf: Vec<f64> = (0..n)
            .map(|i| if i >= lo && i <= hi { assembly.mass[i] * full[i] } else { 0.0 })
            .collect();
        lambda.push(nu - assembly.shift());
        residual.push(r2.sqrt());
        phi.push(full);
        mphi.push(mf);
    }
    Ok(SpectralDecomposition {
        assembly: assembly.clone(),
        lambda,
        phi,
        mphi,
        residual,
    })
}

/// The `k`-th smallest (0-based) eigenvalue of the pencil by Sturm bisection.
fn bisect_level(diag: &[f64], off: &[f64], b: &[f64], k: usize, upper: f64) -> f64 {
    let mut lo = -1e-300_f64.max(1e-14 * upper);
    let mut hi = upper * (1.0 + 1e-12) + 1.0;
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi || hi - lo <= 4.0 * f64::EPSILON * mid.abs() {
            break;
        }
        if pencil_count_below(diag, off, b, mid) > k {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

fn inverse_iteration(diag: &[f64], off: &[f64], b: &[f64], shift: f64, k: usize) -> Result<Vec<f64>> {
    let m = diag.len();
    let shifted: Vec<f64> = (0..m).map(|i| diag[i] - shift * b[i]).collect();
    let lu = TridiagonalLu::factor(off, &shifted, off)?;
    // deterministic start with components in every level
    let mut y: Vec<f64> = (0..m)
        .map(|i| 1.0 + 0.5 * ((i as f64 + 1.0) * std::f64::consts::FRAC_1_SQRT_2 + k as f64).sin())
        .collect();
    for _ in 0..6 {
        let mut rhs: Vec<f64> = (0..m).map(|i| b[i] * y[i]).collect();
        lu.solve_in_place(&mut rhs);
        let nrm = (0..m).map(|i| b[i] * rhs[i] * rhs[i]).sum::<f64>().sqrt();
        if !nrm.is_finite() || nrm == 0.0 {
            return Err(FdxError::Eigensolver(format!(
                "inverse iteration broke down at level {}",
                k + 1
            )));
        }
        y = rhs.into_iter().map(|v| v / nrm).collect();
    }
    Ok(y)
}

impl SpectralDecomposition {
    pub fn assembly(&self) -> &Arc<OperatorAssembly> {
        &self.assembly
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.assembly.grid()
    }

    pub fn k_max(&self) -> usize {
        self.lambda.len()
    }

    /// Eigenvalues λ_1 ≤ … ≤ λ_{k_max} (stored 0-based).
    pub fn lambdas(&self) -> &[f64] {
        &self.lambda
    }

    /// Eigenvalue λ_k, 1-based.
    pub fn lambda(&self, k: usize) -> f64 {
        self.lambda[k - 1]
    }

    /// Nodal values of φ_k, 1-based.
    pub fn phi(&self, k: usize) -> &[f64] {
        &self.phi[k - 1]
    }

    pub fn phi_field(&self, k: usize) -> Field {
        Field::new(self.grid().clone(), self.phi[k - 1].clone()).expect("length checked at build")
    }

    /// `‖L φ_k − λ_k φ_k‖_{L²_{p+1}}` for each pair.
    pub fn residuals(&self) -> &[f64] {
        &self.residual
    }

    /// ⟨h, φ_k⟩_{p+1}, 1-based.
    pub fn coefficient(&self, h: &[f64], k: usize) -> f64 {
        dot(&self.mphi[k - 1], h)
    }

    /// Coefficients against φ_1 … φ_count.
    pub fn coefficients(&self, h: &[f64], count: usize) -> Vec<f64> {
        self.mphi[..count].iter().map(|m| dot(m, h)).collect()
    }

    /// Σ_k a_k φ_k.
    pub fn synthesize(&self, coeffs: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.grid().len()];
        for (a, ph) in coeffs.iter().zip(&self.phi) {
            if *a == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(ph) {
                *o += a * v;
            }
        }
        out
    }

    pub fn inner(&self, u: &[f64], v: &[f64]) -> f64 {
        self.assembly.inner(u, v)
    }

    pub fn norm(&self, u: &[f64]) -> f64 {
        self.assembly.norm(u)
    }

    fn check_cut(&self, k: usize) -> Result<()> {
        if k == 0 || k >= self.k_max() {
            return Err(FdxError::InvalidParameter(format!(
                "cut index K = {k} out of range (need 1 <= K < k_max = {})",
                self.k_max()
            )));
        }
        Ok(())
    }

    fn check_len(&self, h: &Field) -> Result<()> {
        if h.len() != self.grid().len() {
            return Err(FdxError::LengthMismatch {
                expected: self.grid().len(),
                got: h.len(),
            });
        }
        Ok(())
    }

    /// `(P_c h, P_s h)` for the cut at index `k`.
    pub fn project(&self, k: usize, h: &Field) -> Result<(Field, Field)> {
        self.check_cut(k)?;
        self.check_len(h)?;
        let hc = self.synthesize(&self.coefficients(h.values(), k));
        let hs: Vec<f64> = h.values().iter().zip(&hc).map(|(a, b)| a - b).collect();
        Ok((
            Field::new(self.grid().clone(), hc)?,
            Field::new(self.grid().clone(), hs)?,
        ))
    }

    /// Norm of the part of `h` not resolved by the first k_max eigenfields.
    pub fn tail_norm(&self, h: &[f64]) -> f64 {
        let c = self.coefficients(h, self.k_max());
        let r = self.synthesize(&c);
        let d: Vec<f64> = h.iter().zip(&r).map(|(a, b)| a - b).collect();
        self.norm(&d)
    }

    /// `Σ_k e^{−λ_k t} ⟨h, φ_k⟩ φ_k`.
    pub fn semigroup(&self, t: f64, h: &Field) -> Result<Field> {
        if !(t >= 0.0) {
            return Err(FdxError::InvalidParameter(format!(
                "semigroup time t = {t} must be nonnegative"
            )));
        }
        self.check_len(h)?;
        let tail = self.tail_norm(h.values());
        if tail > 1e-8 {
            warn!("semigroup input has unresolved tail of norm {tail:e}; it is discarded");
        }
        let c: Vec<f64> = self
            .coefficients(h.values(), self.k_max())
            .into_iter()
            .zip(&self.lambda)
            .map(|(a, l)| a * (-l * t).exp())
            .collect();
        Field::new(self.grid().clone(), self.synthesize(&c))
    }

    /// `L_c^{−1} f = Σ_{k ≤ K} e^{λ_k} ⟨f, φ_k⟩ φ_k` for `f` in the center space.
    pub fn invert_center(&self, k: usize, f: &Field) -> Result<Field> {
        self.check_cut(k)?;
        self.check_len(f)?;
        let c = self.coefficients(f.values(), k);
        let fc = self.synthesize(&c);
        let d: Vec<f64> = f.values().iter().zip(&fc).map(|(a, b)| a - b).collect();
        let stable = self.norm(&d);
        if stable > 1e-10 * (1.0 + self.norm(f.values())) {
            return Err(FdxError::NotInCenterSpace { norm: stable });
        }
        let c: Vec<f64> = c
            .into_iter()
            .zip(&self.lambda)
            .map(|(a, l)| a * l.exp())
            .collect();
        Field::new(self.grid().clone(), self.synthesize(&c))
    }

    pub fn write_spectrum_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["k", "lambda_k"])?;
        for (k, l) in self.lambda.iter().enumerate() {
            wr.write_record([(k + 1).to_string(), fmt_f64(*l)])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn write_eigenfields_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["x".to_string()];
        header.extend((1..=self.k_max()).map(|k| format!("phi_{k}")));
        wr.write_record(&header)?;
        for (i, x) in self.grid().x().iter().enumerate() {
            let mut row = vec![fmt_f64(*x)];
            row.extend(self.phi.iter().map(|ph| fmt_f64(ph[i])));
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0_f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for j in 0..4 {
            acc[j] += x[j] * y[j];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapParameters {
    /// Cut index: E_c is spanned by φ_1 … φ_K.
    pub k: usize,
    pub lambda_plus: f64,
    pub lambda_minus: f64,
    pub lambda_1: f64,
    pub lambda_k: f64,
    pub lambda_k1: f64,
    pub big_lambda_plus: f64,
    pub big_lambda_max: f64,
    pub big_lambda_c: f64,
    pub big_lambda_minus: f64,
    pub big_lambda_s: f64,
    pub eps_gap: f64,
    pub k_contr: f64,
}

/// Ladder, gap and contraction constant for the cut at `k`.
///
/// `lambda_minus` overrides the midpoint choice; it must lie strictly
/// between λ_K and λ_{K+1}.
pub fn gap_parameters(
    decomp: &SpectralDecomposition,
    k: usize,
    target_kcontr: f64,
    lambda_minus: Option<f64>,
) -> Result<GapParameters> {
    if k == 0 || k >= decomp.k_max() {
        return Err(FdxError::InvalidParameter(format!(
            "cut index K = {k} out of range (need 1 <= K < k_max = {})",
            decomp.k_max()
        )));
    }
    if !(target_kcontr > 0.0 && target_kcontr < 1.0) {
        return Err(FdxError::InvalidParameter(format!(
            "target contraction {target_kcontr} must lie in (0, 1)"
        )));
    }
    let l1 = decomp.lambda(1);
    let lk = decomp.lambda(k);
    let lk1 = decomp.lambda(k + 1);
    let gap = lk1 - lk;
    if gap < MIN_GAP {
        return Err(FdxError::DegenerateGap { k, next: k + 1, gap });
    }
    let lm = lambda_minus.unwrap_or(0.5 * (lk + lk1));
    if !(lm > lk && lm < lk1) {
        return Err(FdxError::InvalidParameter(format!(
            "lambda_minus = {lm} must lie strictly between {lk} and {lk1}"
        )));
    }
    let lp = l1 - 1.0;
    let big = |l: f64| (-l).exp();
    let (bp, bmax, bc, bm, bs) = (big(lp), big(l1), big(lk), big(lm), big(lk1));
    let pairs = [(bmax, bp), (bs, bm), (bm, bc)];
    // each ratio (num + ε)/den is affine in ε, so the largest admissible ε
    // is the smallest of target·den − num
    let eps_gap = pairs
        .iter()
        .map(|&(num, den)| target_kcontr * den - num)
        .fold(f64::INFINITY, f64::min);
    if !(eps_gap > 0.0) {
        return Err(FdxError::InvalidParameter(format!(
            "target contraction {target_kcontr} is below the zero-gap ratio; no positive eps_gap exists"
        )));
    }
    let k_contr = contraction_constant(&pairs, eps_gap);
    Ok(GapParameters {
        k,
        lambda_plus: lp,
        lambda_minus: lm,
        lambda_1: l1,
        lambda_k: lk,
        lambda_k1: lk1,
        big_lambda_plus: bp,
        big_lambda_max: bmax,
        big_lambda_c: bc,
        big_lambda_minus: bm,
        big_lambda_s: bs,
        eps_gap,
        k_contr,
    })
}

fn contraction_constant(pairs: &[(f64, f64); 3], eps: f64) -> f64 {
    pairs
        .iter()
        .map(|&(num, den)| (num + eps) / den)
        .fold(0.0_f64, f64::max)
}

impl GapParameters {
    /// The three ratios of the contraction condition evaluated at `eps`.
    pub fn ratios(&self, eps: f64) -> [f64; 3] {
        [
            (self.big_lambda_max + eps) / self.big_lambda_plus,
            (self.big_lambda_s + eps) / self.big_lambda_minus,
            (self.big_lambda_minus + eps) / self.big_lambda_c,
        ]
    }

    /// Λ_s < Λ_− < Λ_c ≤ Λ_max < Λ_+, with Λ_c = Λ_max exactly when K = 1.
    pub fn ladder_ordered(&self) -> bool {
        let top = if self.k == 1 {
            self.big_lambda_c == self.big_lambda_max
        } else {
            self.big_lambda_c < self.big_lambda_max
        };
        self.big_lambda_s < self.big_lambda_minus
            && self.big_lambda_minus < self.big_lambda_c
            && top
            && self.big_lambda_max < self.big_lambda_plus
    }

    /// Lipschitz bound for the center-manifold graph.
    pub fn theta_lip_bound(&self) -> f64 {
        self.eps_gap / ((self.big_lambda_minus - self.big_lambda_s) * (1.0 - self.k_contr))
    }

    /// Lipschitz bound for the stable slice.
    pub fn psi_lip_bound(&self) -> f64 {
        self.eps_gap / ((1.0 - self.k_contr) * (self.big_lambda_c - self.big_lambda_minus))
    }
}
