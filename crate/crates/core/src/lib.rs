//! Numerical machinery for reconstructing objects from two independent
//! projections, and for diagnosing when that reconstruction is unique.
//!
//! The crate is organised by subsystem:
//!
//! * [`scene`]: point objects, affine projections, slab-binned Radon samples,
//!   moment maps and the two-projection point solver.
//! * [`connection`]: grid-sampled connections, parallel transport, curvature,
//!   torsion, holonomy and the twisted-bracket Jacobiator.
//! * [`reconstructor`]: the stacked direction solver, frame construction,
//!   initial-point search and flow integration.
//! * [`star`]: the transported product on matrix-valued sections, associators,
//!   the associativity verdict, Moufang checks and division.
//! * [`toric`]: discretised rotation groups, group averaging and the
//!   symmetry-regularised least-squares solver.
//! * [`imputer`]: mask foliations, a fitted polynomial connection and
//!   path-sampled imputation.
//!
//! Data-parallel loops go through [`exec::Exec`], which falls back to plain
//! iteration when the `parallel` feature is disabled.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod connection;
pub mod error;
pub mod exec;
pub mod imputer;
pub mod linalg;
pub mod reconstructor;
pub mod scene;
pub mod star;
pub mod toric;

pub use error::{Error, Result};
pub use exec::Exec;
