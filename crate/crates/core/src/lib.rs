//! Numerical toolkit for parabolic equations with periodic, rapidly
//! oscillating coefficients: effective matrices from cell problems,
//! Dirichlet solvers on half-spaces and Lipschitz cylinders, caloric-measure
//! and Green's-function diagnostics, and homogenization experiments.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cell;
pub mod coeffs;
pub mod error;
pub mod expr;
pub mod fv;
pub mod geometry;
pub mod harness;
pub mod linalg;
pub mod maximal;
pub mod oracle;
pub mod pde;
pub mod potential;

pub use error::{Error, Result};
