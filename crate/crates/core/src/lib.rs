//! Numerical laboratory for the fast diffusion equation near extinction:
//! Lane–Emden profiles, the weighted linearized operator, the truncated
//! relative-error semiflow and fixed-point constructions of its center and
//! stable manifolds.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod experiments;
pub mod grid;
pub mod manifolds;
pub mod nonlinearity;
pub mod operator;
pub mod semiflow;
pub mod stationary;
pub mod tridiag;

pub use error::{FdxError, Result};

/// Version tag carried by every JSON summary.
pub const SCHEMA_VERSION: u32 = 1;
