//! Tridiagonal kernels: banded LU with partial pivoting, symmetric LDLᵀ for
//! repeated solves, and the Sturm inertia count of a tridiagonal pencil.

use crate::error::{FdxError, Result};

/// LU factorization of a general tridiagonal matrix with partial pivoting.
///
/// Storage follows the LAPACK `gttrf` layout: `dl` sub-diagonal multipliers,
/// `d` the diagonal of U, `du`/`du2` the first and second super-diagonals.
#[derive(Debug, Clone)]
pub struct TridiagonalLu {
    dl: Vec<f64>,
    d: Vec<f64>,
    du: Vec<f64>,
    du2: Vec<f64>,
    ipiv: Vec<usize>,
}

impl TridiagonalLu {
    pub fn factor(sub: &[f64], diag: &[f64], sup: &[f64]) -> Result<Self> {
        let n = diag.len();
        if n == 0 || sub.len() + 1 != n || sup.len() + 1 != n {
            return Err(FdxError::InvalidParameter(
                "tridiagonal band lengths are inconsistent".into(),
            ));
        }
        let mut dl = sub.to_vec();
        let mut d = diag.to_vec();
        let mut du = sup.to_vec();
        let mut du2 = vec![0.0; n.saturating_sub(2)];
        let mut ipiv: Vec<usize> = (0..n).collect();
        for i in 0..n.saturating_sub(1) {
            if d[i].abs() >= dl[i].abs() {
                if d[i] != 0.0 {
                    let fact = dl[i] / d[i];
                    dl[i] = fact;
                    d[i + 1] -= fact * du[i];
                }
            } else {
                let fact = d[i] / dl[i];
                d[i] = dl[i];
                dl[i] = fact;
                let temp = du[i];
                du[i] = d[i + 1];
                d[i + 1] = temp - fact * d[i + 1];
                if i + 2 < n {
                    du2[i] = du[i + 1];
                    du[i + 1] *= -fact;
                }
                ipiv[i] = i + 1;
            }
        }
        // exactly singular pivots are nudged so that inverse iteration can
        // run with a shift sitting on an eigenvalue
        let scale = d.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        for v in d.iter_mut() {
            if *v == 0.0 {
                *v = f64::EPSILON * scale;
            }
        }
        Ok(Self { dl, d, du, du2, ipiv })
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.d.len();
        debug_assert_eq!(b.len(), n);
        for i in 0..n.saturating_sub(1) {
            let ip = self.ipiv[i];
            let other = if ip == i { i + 1 } else { i };
            let temp = b[other] - self.dl[i] * b[ip];
            b[i] = b[ip];
            b[i + 1] = temp;
        }
        b[n - 1] /= self.d[n - 1];
        if n > 1 {
            b[n - 2] = (b[n - 2] - self.du[n - 2] * b[n - 1]) / self.d[n - 2];
        }
        for i in (0..n.saturating_sub(2)).rev() {
            b[i] = (b[i] - self.du[i] * b[i + 1] - self.du2[i] * b[i + 2]) / self.d[i];
        }
    }
}

/// LDLᵀ factorization of a symmetric positive definite tridiagonal matrix.
#[derive(Debug, Clone)]
pub struct SymTridiagonalLdl {
    d: Vec<f64>,
    l: Vec<f64>,
}

impl SymTridiagonalLdl {
    /// `off[i]` couples rows `i` and `i + 1`.
    pub fn factor(diag: &[f64], off: &[f64]) -> Result<Self> {
        let n = diag.len();
        if n == 0 || off.len() + 1 != n {
            return Err(FdxError::InvalidParameter(
                "tridiagonal band lengths are inconsistent".into(),
            ));
        }
        let mut d = vec![0.0; n];
        let mut l = vec![0.0; n - 1];
        d[0] = diag[0];
        for i in 0..n - 1 {
            if d[i] <= 0.0 || !d[i].is_finite() {
                return Err(FdxError::InvalidParameter(format!(
                    "matrix is not positive definite (pivot {} = {:e})",
                    i, d[i]
                )));
            }
            l[i] = off[i] / d[i];
            d[i + 1] = diag[i + 1] - l[i] * off[i];
        }
        if d[n - 1] <= 0.0 || !d[n - 1].is_finite() {
            return Err(FdxError::InvalidParameter(
                "matrix is not positive definite (last pivot)".into(),
            ));
        }
        Ok(Self { d, l })
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.d.len();
        for i in 1..n {
            b[i] -= self.l[i - 1] * b[i - 1];
        }
        for i in 0..n {
            b[i] /= self.d[i];
        }
        for i in (0..n - 1).rev() {
            b[i] -= self.l[i] * b[i + 1];
        }
    }
}

/// Number of eigenvalues strictly below `sigma` of the symmetric pencil
/// `A x = ν B x`, where `A` is tridiagonal (`diag`, `off`) and `B = diag(mass)`
/// is positive. Sylvester's law of inertia applied to `A − σB`.
pub fn pencil_count_below(diag: &[f64], off: &[f64], mass: &[f64], sigma: f64) -> usize {
    let n = diag.len();
    let scale = diag
        .iter()
        .zip(mass)
        .fold(0.0_f64, |m, (a, b)| m.max(a.abs()).max((sigma * b).abs()));
    let pivmin = f64::MIN_POSITIVE.max(scale * f64::EPSILON * f64::EPSILON);
    let mut count = 0;
    let mut q = diag[0] - sigma * mass[0];
    if q.abs() < pivmin {
        q = -pivmin;
    }
    if q < 0.0 {
        count += 1;
    }
    for i in 1..n {
        q = diag[i] - sigma * mass[i] - off[i - 1] * off[i - 1] / q;
        if q.abs() < pivmin {
            q = -pivmin;
        }
        if q < 0.0 {
            count += 1;
        }
    }
    count
}
