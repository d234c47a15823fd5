//! Connections sampled on a coordinate chart: transport along axis-aligned
//! paths, curvature, holonomy, and torsion of affine connections.
//!
//! Transport solves `dP/dt = -w(gamma') P`; the same sign is used for the
//! curvature integral in [`stokes_residual`].

mod affine;
mod chart;
mod field;
mod path;

pub use affine::{apply_torsion, tidx, torsion, twisted_jacobiator, AffineField};
pub use chart::Chart;
pub use field::{
    build_field, generator_arity, monomial_count, monomials, ConnectionField, Generator, MatrixGrid,
    SIGN_CONVENTION,
};
pub use path::{curvature_integral, holonomy_loop, stokes_residual, transport_path, GridPath};

use crate::error::{Error, Result};

/// Tensor product of two line-bundle connections: the coefficients add.
pub fn tensor_line_field(a: &ConnectionField, b: &ConnectionField) -> Result<ConnectionField> {
    if a.fiber_dim() != 1 || b.fiber_dim() != 1 {
        return Err(Error::invalid("line-bundle tensor product needs fiber dimension 1"));
    }
    if a.chart() != b.chart() {
        return Err(Error::invalid("fields live on different charts"));
    }
    let omega = (0..a.dim())
        .map(|j| a.raw(j).iter().zip(b.raw(j)).map(|(x, y)| x + y).collect())
        .collect();
    ConnectionField::from_raw(a.chart().clone(), 1, omega)
}
