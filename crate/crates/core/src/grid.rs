//! Discretized domains, grid functions and weighted quadrature.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{FdxError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DomainKind {
    Interval,
    RadialBall,
}

impl FromStr for DomainKind {
    type Err = FdxError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "interval" => Ok(DomainKind::Interval),
            "radial-ball" | "ball" => Ok(DomainKind::RadialBall),
            other => Err(FdxError::InvalidParameter(format!(
                "unknown domain kind '{other}' (expected 'interval' or 'radial-ball')"
            ))),
        }
    }
}

impl fmt::Display for DomainKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DomainKind::Interval => write!(f, "interval"),
            DomainKind::RadialBall => write!(f, "radial-ball"),
        }
    }
}

/// Nodes, trapezoidal weights and the radial measure factor on [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    kind: DomainKind,
    dim: usize,
    grading: f64,
    x: Vec<f64>,
    q: Vec<f64>,
    mu: Vec<f64>,
}

pub fn build_grid(kind: DomainKind, dim: usize, n: usize, grading: f64) -> Result<Arc<Grid>> {
    if n < 16 {
        return Err(FdxError::InvalidParameter(format!(
            "node count n = {n} is too small (need n >= 16)"
        )));
    }
    if !(grading >= 1.0) || !grading.is_finite() {
        return Err(FdxError::InvalidParameter(format!(
            "grading = {grading} must be a finite number >= 1"
        )));
    }
    if dim == 0 {
        return Err(FdxError::InvalidParameter("dimension N must be positive".into()));
    }
    if kind == DomainKind::Interval && dim != 1 {
        return Err(FdxError::InvalidParameter(format!(
            "the interval forces N = 1 (got N = {dim})"
        )));
    }
    let last = (n - 1) as f64;
    let mut x: Vec<f64> = (0..n)
        .map(|i| 1.0 - (1.0 - i as f64 / last).powf(grading))
        .collect();
    x[0] = 0.0;
    x[n - 1] = 1.0;
    let mut q = vec![0.0; n];
    q[0] = 0.5 * (x[1] - x[0]);
    q[n - 1] = 0.5 * (x[n - 1] - x[n - 2]);
    for i in 1..n - 1 {
        q[i] = 0.5 * (x[i + 1] - x[i - 1]);
    }
    let mu = x.iter().map(|&xi| radial_factor(xi, dim)).collect();
    Ok(Arc::new(Grid {
        kind,
        dim,
        grading,
        x,
        q,
        mu,
    }))
}

pub(crate) fn radial_factor(x: f64, dim: usize) -> f64 {
    if dim == 1 {
        1.0
    } else {
        x.powi(dim as i32 - 1)
    }
}

impl Grid {
    pub fn kind(&self) -> DomainKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn grading(&self) -> f64 {
        self.grading
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    /// Measure factor at the midpoint of edge `i -- i+1`.
    pub fn mu_mid(&self, i: usize) -> f64 {
        radial_factor(0.5 * (self.x[i] + self.x[i + 1]), self.dim)
    }

    /// Whether node `i` lies on the Dirichlet part of the boundary.
    pub fn is_boundary(&self, i: usize) -> bool {
        let n = self.len();
        match self.kind {
            DomainKind::Interval => i == 0 || i + 1 == n,
            DomainKind::RadialBall => i + 1 == n,
        }
    }

    /// Distance of node `i` to the boundary.
    pub fn boundary_distance(&self, i: usize) -> f64 {
        let xi = self.x[i];
        match self.kind {
            DomainKind::Interval => xi.min(1.0 - xi),
            DomainKind::RadialBall => 1.0 - xi,
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["index", "x", "q", "mu"])?;
        for i in 0..self.len() {
            wr.write_record([
                i.to_string(),
                fmt_f64(self.x[i]),
                fmt_f64(self.q[i]),
                fmt_f64(self.mu[i]),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.17e}")
}

/// A real grid function.
#[derive(Debug, Clone)]
pub struct Field {
    grid: Arc<Grid>,
    values: Vec<f64>,
}

impl Field {
    pub fn new(grid: Arc<Grid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(FdxError::LengthMismatch {
                expected: grid.len(),
                got: values.len(),
            });
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: &Arc<Grid>) -> Self {
        Self {
            values: vec![0.0; grid.len()],
            grid: grid.clone(),
        }
    }

    pub fn constant(grid: &Arc<Grid>, c: f64) -> Self {
        Self {
            values: vec![c; grid.len()],
            grid: grid.clone(),
        }
    }

    pub fn from_fn(grid: &Arc<Grid>, f: impl Fn(f64) -> f64) -> Self {
        Self {
            values: grid.x().iter().map(|&x| f(x)).collect(),
            grid: grid.clone(),
        }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_grid(&self, other: &Field) -> bool {
        Arc::ptr_eq(&self.grid, &other.grid) || *self.grid == *other.grid
    }

    pub fn check_grid(&self, other: &Field) -> Result<()> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(FdxError::GridMismatch)
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field {
            grid: self.grid.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scaled(&self, a: f64) -> Field {
        self.map(|v| a * v)
    }

    pub fn add(&self, other: &Field) -> Result<Field> {
        self.check_grid(other)?;
        Ok(self.zip_with(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Field) -> Result<Field> {
        self.check_grid(other)?;
        Ok(self.zip_with(other, |a, b| a - b))
    }

    /// `self += a * other`
    pub fn axpy(&mut self, a: f64, other: &Field) -> Result<()> {
        self.check_grid(other)?;
        for (s, o) in self.values.iter_mut().zip(&other.values) {
            *s += a * o;
        }
        Ok(())
    }

    fn zip_with(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Field {
        Field {
            grid: self.grid.clone(),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn norm_inf(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// `Σ q_i μ_i u_i v_i V_i^σ`
pub fn weighted_inner(u: &Field, v: &Field, weight: &Field, sigma: f64) -> Result<f64> {
    u.check_grid(v)?;
    u.check_grid(weight)?;
    let grid = u.grid();
    for (i, &w) in weight.values().iter().enumerate() {
        if w < 0.0 && !grid.is_boundary(i) {
            return Err(FdxError::NegativeWeight { node: i });
        }
    }
    let mut s = 0.0;
    for i in 0..grid.len() {
        let w = if sigma == 0.0 {
            1.0
        } else {
            weight.values()[i].max(0.0).powf(sigma)
        };
        // u·v first: the product is commutative, so the pairing is exactly symmetric
        s += grid.q()[i] * grid.mu()[i] * (u.values()[i] * v.values()[i]) * w;
    }
    Ok(s)
}

pub fn weighted_norm(u: &Field, weight: &Field, sigma: f64) -> Result<f64> {
    Ok(weighted_inner(u, u, weight, sigma)?.max(0.0).sqrt())
}

/// Second-order three-point derivative on possibly nonuniform nodes.
pub fn gradient(h: &Field) -> Field {
    let values = gradient_values(h.grid().x(), h.values());
    Field {
        grid: h.grid().clone(),
        values,
    }
}

pub(crate) fn gradient_values(x: &[f64], f: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    GradientStencil::new(x).apply(f, &mut g);
    g
}

/// Precomputed weights of the three-point derivative.
#[derive(Debug, Clone)]
pub(crate) struct GradientStencil {
    w: Vec<[f64; 3]>,
}

impl GradientStencil {
    pub(crate) fn new(x: &[f64]) -> Self {
        let n = x.len();
        let mut w = vec![[0.0; 3]; n];
        w[0] = one_sided_start(x[1] - x[0], x[2] - x[1]);
        for i in 1..n - 1 {
            let h1 = x[i] - x[i - 1];
            let h2 = x[i + 1] - x[i];
            w[i] = [
                -h2 / (h1 * (h1 + h2)),
                (h2 - h1) / (h1 * h2),
                h1 / (h2 * (h1 + h2)),
            ];
        }
        // mirror the start formula
        let e = one_sided_start(x[n - 1] - x[n - 2], x[n - 2] - x[n - 3]);
        w[n - 1] = [e[2], e[1], e[0]].map(|v| -v);
        Self { w }
    }

    pub(crate) fn apply(&self, f: &[f64], g: &mut [f64]) {
        let n = self.w.len();
        let w = &self.w;
        g[0] = w[0][0] * f[0] + w[0][1] * f[1] + w[0][2] * f[2];
        for i in 1..n - 1 {
            g[i] = w[i][0] * f[i - 1] + w[i][1] * f[i] + w[i][2] * f[i + 1];
        }
        let m = n - 1;
        g[m] = w[m][0] * f[m - 2] + w[m][1] * f[m - 1] + w[m][2] * f[m];
    }
}

fn one_sided_start(h1: f64, h2: f64) -> [f64; 3] {
    [
        -(2.0 * h1 + h2) / (h1 * (h1 + h2)),
        (h1 + h2) / (h1 * h2),
        -h1 / (h2 * (h1 + h2)),
    ]
}

/// `‖h‖_{L²} / (‖h‖_{L²_{p+1}} + ‖∇h‖_{L²_2})`
pub fn hardy_ratio(h: &Field, weight: &Field, p: f64) -> Result<f64> {
    h.check_grid(weight)?;
    if h.values().iter().all(|&v| v == 0.0) {
        return Err(FdxError::UndefinedRatio(
            "the Hardy ratio of the zero field is undefined".into(),
        ));
    }
    let plain = weighted_norm(h, weight, 0.0)?;
    let wp = weighted_norm(h, weight, p + 1.0)?;
    let dh = gradient(h);
    let wg = weighted_norm(&dh, weight, 2.0)?;
    let den = wp + wg;
    if den == 0.0 {
        return Err(FdxError::UndefinedRatio(
            "field vanishes wherever the weight is positive".into(),
        ));
    }
    Ok(plain / den)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn uniform_trapezoid() {
        let g = build_grid(DomainKind::Interval, 1, 17, 1.0).unwrap();
        assert_abs_diff_eq!(g.q()[0], 1.0 / 32.0, epsilon = 1e-15);
        assert_abs_diff_eq!(g.q()[5], 1.0 / 16.0, epsilon = 1e-15);
        assert_abs_diff_eq!(g.q().iter().sum::<f64>(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn ball_measure_factor() {
        let g = build_grid(DomainKind::RadialBall, 3, 17, 1.0).unwrap();
        for (x, mu) in g.x().iter().zip(g.mu()) {
            assert_abs_diff_eq!(*mu, x * x, epsilon = 1e-15);
        }
        assert_eq!(g.mu()[0], 0.0);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(build_grid(DomainKind::Interval, 1, 4, 1.0).is_err());
        assert!(build_grid(DomainKind::Interval, 2, 32, 1.0).is_err());
        assert!(build_grid(DomainKind::Interval, 1, 32, 0.5).is_err());
        assert!("disk".parse::<DomainKind>().is_err());
    }

    #[test]
    fn graded_spacing_shrinks_towards_boundary() {
        let g = build_grid(DomainKind::Interval, 1, 401, 2.0).unwrap();
        let dx: Vec<f64> = g.x().windows(2).map(|w| w[1] - w[0]).collect();
        assert!(dx.windows(2).all(|w| w[1] < w[0]));
        assert_eq!(*g.x().last().unwrap(), 1.0);
    }

    #[test]
    fn gradient_exact_on_quadratics() {
        let g = build_grid(DomainKind::Interval, 1, 33, 1.7).unwrap();
        let f = Field::from_fn(&g, |x| 3.0 * x * x - x + 2.0);
        let d = gradient(&f);
        for (x, v) in g.x().iter().zip(d.values()) {
            assert_abs_diff_eq!(*v, 6.0 * x - 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn negative_interior_weight_rejected() {
        let g = build_grid(DomainKind::Interval, 1, 16, 1.0).unwrap();
        let one = Field::constant(&g, 1.0);
        let mut w = Field::constant(&g, 1.0);
        w.values_mut()[3] = -0.1;
        assert!(matches!(
            weighted_inner(&one, &one, &w, 2.0),
            Err(FdxError::NegativeWeight { node: 3 })
        ));
    }

    #[test]
    fn grid_mismatch_detected() {
        let a = build_grid(DomainKind::Interval, 1, 16, 1.0).unwrap();
        let b = build_grid(DomainKind::Interval, 1, 17, 1.0).unwrap();
        let fa = Field::zeros(&a);
        let fb = Field::zeros(&b);
        assert!(matches!(fa.add(&fb), Err(FdxError::GridMismatch)));
        assert!(Field::new(a, vec![0.0; 3]).is_err());
    }
}
