//! Perturbed KMS states of Dirac fermions under switched external potentials,
//! worked out at the level of one-particle operators on a periodic momentum lattice.

// NaN must fail the `!(x > 0.0)` style argument checks
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod dynamics;
pub mod entropy;
pub mod estimates;
pub mod error;
pub mod fermi_derivatives;
pub mod kms;
pub mod linop;
pub mod model;
pub mod ness;
pub mod quad;

pub use error::{Error, Result};
