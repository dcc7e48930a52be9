//! Acoustic cloak design under uncertainty: P1 finite elements for
//! PML-truncated Helmholtz scattering, Gaussian random fields, adjoint
//! derivatives, randomized eigensolvers and an inexact Newton optimizer.

// NaN-rejecting `!(x > 0.0)` checks and indexed numeric loops are intended.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod error;
pub mod exec;
pub mod export;
pub mod fem;
pub mod helmholtz;
pub mod mesh;
pub mod objective;
pub mod optimizer;
pub mod random_field;
pub mod runs;
pub mod sensitivity;
pub mod spectral;

pub use error::{CloakError, Result};

/// Target edge length of the coarsest standard mesh (about 11k vertices).
pub const MESH1_SIZE: f64 = 0.114;
