//! Reconstruction of the coefficients of a second-order elliptic equation
//! from internal functionals `H_j = d u_j` of its solutions.

// NaN must fail every threshold test, so negated comparisons are deliberate.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod admissibility;
pub mod diff;
pub mod dsl;
pub mod error;
pub mod field;
pub mod forward;
pub mod gauge;
pub mod grid;
pub mod harness;
pub mod io;
pub mod linalg;
pub mod recon;
pub mod synthesis;

pub use error::{Error, Result};
pub use field::{ScalarField, SymTensorField, VectorField, C64};
pub use grid::{interior_mask, make_grid, Grid, InteriorMask};
