//! The nonlinearities M and N of the relative-error equation, the smooth
//! cutoff η and the truncated nonlinearity M^ε.

use serde::{Deserialize, Serialize};

use crate::error::{FdxError, Result};
use crate::grid::{gradient_values, Field, GradientStencil};
use crate::operator::OperatorAssembly;
use crate::stationary::pos_pow;

/// Clamp applied to h inside truncated factors.
const TRUNC_CLAMP: f64 = 0.5;

/// Quintic smoothstep `s³(6s² − 15s + 10)`.
#[inline]
fn smoothstep(s: f64) -> f64 {
    s * s * s * (s * (6.0 * s - 15.0) + 10.0)
}

/// Even C² cutoff: 1 on [−1, 1], 0 outside [−2, 2].
#[inline]
pub fn eta(z: f64) -> f64 {
    let a = z.abs();
    if a <= 1.0 {
        1.0
    } else if a >= 2.0 {
        0.0
    } else {
        1.0 - smoothstep(a - 1.0)
    }
}

/// Lipschitz constant of η (max of the smoothstep slope, 30/16).
pub const ETA_LIP: f64 = 1.875;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncationConfig {
    pub eps: f64,
    pub eps0: f64,
}

impl TruncationConfig {
    pub fn new(eps: f64, eps0: f64) -> Result<Self> {
        let cfg = Self { eps, eps0 };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(FdxError::InvalidParameter(format!(
                "truncation eps = {} must be positive",
                self.eps
            )));
        }
        // the clamp must stay inactive on the cutoff supports: 2 eps0 < 1/2
        if !(self.eps0 > 0.0 && 2.0 * self.eps0 < TRUNC_CLAMP) {
            return Err(FdxError::InvalidParameter(format!(
                "admissibility threshold eps0 = {} must lie in (0, 0.25)",
                self.eps0
            )));
        }
        if self.eps > self.eps0 {
            return Err(FdxError::InvalidParameter(format!(
                "truncation eps = {} exceeds the admissibility threshold eps0 = {}",
                self.eps, self.eps0
            )));
        }
        Ok(())
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(FdxError::InvalidParameter(format!(
            "cutoff scale eps = {eps} must be positive"
        )))
    }
}

/// η(h/ε) pointwise.
pub fn cutoff0(h: &Field, eps: f64) -> Result<Field> {
    check_eps(eps)?;
    Ok(h.map(|v| eta(v / eps)))
}

/// η(h/ε) η(V ∂h/ε) pointwise (one derivative direction on these domains).
pub fn cutoff1(h: &Field, v: &Field, eps: f64) -> Result<Field> {
    check_eps(eps)?;
    h.check_grid(v)?;
    let g = gradient_values(h.grid().x(), h.values());
    let vals = h
        .values()
        .iter()
        .zip(v.values())
        .zip(&g)
        .map(|((&hi, &vi), &gi)| eta(hi / eps) * eta(vi * gi / eps))
        .collect();
    Field::new(h.grid().clone(), vals)
}

/// Scratch-buffered evaluator of M and M^ε on a fixed assembly.
#[derive(Debug, Clone)]
pub struct Nonlinearity {
    x: Vec<f64>,
    stencil: GradientStencil,
    v: Vec<f64>,
    edge: Vec<f64>,
    mass: Vec<f64>,
    p: f64,
    lo: usize,
    hi: usize,
    grad: Vec<f64>,
    c: Vec<f64>,
    kappa: Vec<f64>,
    eta1: Vec<f64>,
    acc: Vec<f64>,
}

/// Node where `1 + h ≤ 0` was met by an untruncated evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Inadmissible {
    pub node: usize,
    pub value: f64,
}

impl From<Inadmissible> for FdxError {
    fn from(e: Inadmissible) -> Self {
        FdxError::OutOfAdmissibleRange {
            node: e.node,
            value: e.value,
        }
    }
}

/// `(1+h)^q − 1` without cancellation for small h.
#[inline]
fn pow_m1(h: f64, q: f64) -> f64 {
    if q == 2.0 {
        h * (2.0 + h)
    } else if q == -1.0 {
        -h / (1.0 + h)
    } else {
        (q * h.ln_1p()).exp_m1()
    }
}

/// `(1+h)^p − 1 − p h`.
#[inline]
fn taylor2(h: f64, p: f64) -> f64 {
    if p == 2.0 {
        h * h
    } else {
        pow_m1(h, p) - p * h
    }
}

#[inline]
fn zeroth_order(h: f64, p: f64) -> f64 {
    let a = 1.0 + h;
    taylor2(h, p) / pos_pow(a, p - 1.0) + (p - 1.0) * pow_m1(h, 1.0 - p) * h
}

impl Nonlinearity {
    pub fn new(asm: &OperatorAssembly) -> Self {
        let n = asm.grid().len();
        let (lo, hi) = asm.active_range();
        Self {
            x: asm.grid().x().to_vec(),
            stencil: GradientStencil::new(asm.grid().x()),
            v: asm.v().values().to_vec(),
            edge: asm.edge().to_vec(),
            mass: asm.mass().to_vec(),
            p: asm.p(),
            lo,
            hi,
            grad: vec![0.0; n],
            c: vec![0.0; n],
            kappa: vec![0.0; n],
            eta1: vec![0.0; n],
            acc: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Untruncated M(h) into `out`.
    pub fn eval(&mut self, h: &[f64], out: &mut [f64]) -> std::result::Result<(), Inadmissible> {
        for (i, &hi) in h.iter().enumerate() {
            if !(1.0 + hi > 0.0) {
                return Err(Inadmissible {
                    node: i,
                    value: 1.0 + hi,
                });
            }
        }
        self.kernel(h, None, out);
        Ok(())
    }

    /// Truncated M^ε(h) into `out`.
    pub fn eval_trunc(&mut self, h: &[f64], eps: f64, out: &mut [f64]) {
        self.kernel(h, Some(eps), out);
    }

    /// Whether η₀ or η₁ drops below one anywhere on positive-mass nodes.
    pub fn truncation_active(&self, h: &[f64], eps: f64) -> bool {
        let mut g = vec![0.0; h.len()];
        self.stencil.apply(h, &mut g);
        (self.lo..=self.hi).any(|i| eta(h[i] / eps) < 1.0 || eta(self.v[i] * g[i] / eps) < 1.0)
    }

    /// sup |V ∂h| over all nodes.
    pub fn sup_v_grad(&self, h: &[f64]) -> f64 {
        let mut g = vec![0.0; h.len()];
        self.stencil.apply(h, &mut g);
        g.iter()
            .zip(&self.v)
            .fold(0.0_f64, |m, (a, b)| m.max((a * b).abs()))
    }

    fn kernel(&mut self, h: &[f64], eps: Option<f64>, out: &mut [f64]) {
        let p = self.p;
        let n = h.len();
        let (lo, hi) = (self.lo, self.hi);
        self.stencil.apply(h, &mut self.grad);
        for i in lo..=hi {
            let (hc, e0, e1) = match eps {
                None => (h[i], 1.0, 1.0),
                Some(e) => {
                    let e0 = eta(h[i] / e);
                    let e1 = if e0 == 0.0 {
                        0.0
                    } else {
                        e0 * eta(self.v[i] * self.grad[i] / e)
                    };
                    (h[i].clamp(-TRUNC_CLAMP, TRUNC_CLAMP), e0, e1)
                }
            };
            let ci = -pow_m1(hc, 1.0 - p);
            self.c[i] = ci;
            self.eta1[i] = e1;
            self.kappa[i] = ci * e1;
            out[i] = if e0 == 0.0 { 0.0 } else { e0 * zeroth_order(hc, p) };
        }
        self.acc[lo..=hi].iter_mut().for_each(|a| *a = 0.0);
        for i in lo..hi {
            let w = self.edge[i];
            if w == 0.0 {
                continue;
            }
            let dh = h[i + 1] - h[i];
            let kbar = 0.5 * (self.kappa[i] + self.kappa[i + 1]);
            let ebar = 0.5 * (self.eta1[i] + self.eta1[i + 1]);
            let flux = w * kbar * dh;
            // product-rule remainder of the divergence: discrete |∇h|² term
            let sq = 0.5 * w * ebar * (self.c[i + 1] - self.c[i]) * dh;
            self.acc[i] += sq - flux;
            self.acc[i + 1] += sq + flux;
        }
        for i in lo..=hi {
            out[i] += self.acc[i] / self.mass[i];
        }
        for (i, o) in out.iter_mut().enumerate().take(n) {
            if i < lo || i > hi {
                *o = 0.0;
            }
        }
    }

    /// First form (1+h)^{1−p}((1+h)^p − 1 − ph) + (1 − (1+h)^{1−p}) L h.
    pub fn eval_first_form(&self, h: &[f64], out: &mut [f64]) -> std::result::Result<(), Inadmissible> {
        let p = self.p;
        for (i, &hi) in h.iter().enumerate() {
            if !(1.0 + hi > 0.0) {
                return Err(Inadmissible {
                    node: i,
                    value: 1.0 + hi,
                });
            }
        }
        let n = h.len();
        let mut ah = vec![0.0; n];
        for i in self.lo..self.hi {
            let flux = self.edge[i] * (h[i + 1] - h[i]);
            ah[i] -= flux;
            ah[i + 1] += flux;
        }
        for i in 0..n {
            if i < self.lo || i > self.hi {
                out[i] = 0.0;
                continue;
            }
            let a = 1.0 + h[i];
            let lh = ah[i] / self.mass[i] - (p - 1.0) * h[i];
            out[i] = pos_pow(a, 1.0 - p) * taylor2(h[i], p) - pow_m1(h[i], 1.0 - p) * lh;
        }
        Ok(())
    }
}

/// M(h), expanded divergence form.
pub fn eval_m(h: &Field, asm: &OperatorAssembly) -> Result<Field> {
    check_len(h, asm)?;
    let mut nl = Nonlinearity::new(asm);
    let mut out = vec![0.0; h.len()];
    nl.eval(h.values(), &mut out)?;
    Field::new(h.grid().clone(), out)
}

/// M(h) through the first form; a cross-check of [`eval_m`].
pub fn eval_m_first_form(h: &Field, asm: &OperatorAssembly) -> Result<Field> {
    check_len(h, asm)?;
    let nl = Nonlinearity::new(asm);
    let mut out = vec![0.0; h.len()];
    nl.eval_first_form(h.values(), &mut out)?;
    Field::new(h.grid().clone(), out)
}

/// M^ε(h).
pub fn eval_m_trunc(h: &Field, asm: &OperatorAssembly, cfg: &TruncationConfig) -> Result<Field> {
    check_len(h, asm)?;
    check_eps(cfg.eps)?;
    let mut nl = Nonlinearity::new(asm);
    let mut out = vec![0.0; h.len()];
    nl.eval_trunc(h.values(), cfg.eps, &mut out);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(FdxError::NonFinite { time: 0.0 });
    }
    Field::new(h.grid().clone(), out)
}

/// N(h, ∂_t h) = (1+h)^p − 1 − ph + (1 − (1+h)^{p−1}) ∂_t h.
pub fn eval_n(h: &Field, dhdt: &Field, p: f64) -> Result<Field> {
    h.check_grid(dhdt)?;
    let mut out = Vec::with_capacity(h.len());
    for (i, (&hi, &di)) in h.values().iter().zip(dhdt.values()).enumerate() {
        let a = 1.0 + hi;
        if !(a > 0.0) {
            return Err(FdxError::OutOfAdmissibleRange { node: i, value: a });
        }
        out.push(taylor2(hi, p) - pow_m1(hi, p - 1.0) * di);
    }
    Field::new(h.grid().clone(), out)
}

fn check_len(h: &Field, asm: &OperatorAssembly) -> Result<()> {
    if h.len() != asm.grid().len() {
        return Err(FdxError::LengthMismatch {
            expected: asm.grid().len(),
            got: h.len(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eta_plateau_support_midpoint() {
        assert_eq!(eta(0.5), 1.0);
        assert_eq!(eta(-1.0), 1.0);
        assert_eq!(eta(2.5), 0.0);
        assert!((eta(1.5) - 0.5).abs() < 1e-15);
        assert!((eta(-1.5) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn eta_lipschitz_constant() {
        let mut worst = 0.0_f64;
        for i in 0..20000 {
            let a = 1.0 + i as f64 / 20000.0;
            let b = a + 1e-6;
            worst = worst.max((eta(a) - eta(b)).abs() / 1e-6);
        }
        assert!(worst <= ETA_LIP + 1e-6);
        assert!(worst > 1.87);
    }

    #[test]
    fn truncation_config_validation() {
        assert!(TruncationConfig::new(0.05, 0.05).is_ok());
        assert!(TruncationConfig::new(0.06, 0.05).is_err());
        assert!(TruncationConfig::new(0.0, 0.05).is_err());
        assert!(TruncationConfig::new(0.1, 0.6).is_err());
    }

    #[test]
    fn zeroth_order_closed_forms() {
        assert!(zeroth_order(0.1, 2.0).abs() < 1e-15);
        assert!((zeroth_order(0.1, 3.0) + 0.01 / 1.1).abs() < 1e-15);
        assert_eq!(zeroth_order(0.0, 2.5), 0.0);
    }

    #[test]
    fn power_differences_keep_relative_accuracy() {
        for p in [1.5, 2.0, 3.0] {
            let h = 1e-9;
            let t = taylor2(h, p);
            let exact = 0.5 * p * (p - 1.0) * h * h;
            assert!((t - exact).abs() <= 1e-6 * exact, "p = {p}");
            assert!((pow_m1(h, 1.0 - p) - (1.0 - p) * h).abs() <= 1e-8 * h);
        }
        assert_eq!(zeroth_order(1e-7, 2.0), 0.0);
    }
}
