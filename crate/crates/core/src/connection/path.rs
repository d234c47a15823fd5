use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::field::{ConnectionField, MatrixGrid};
use crate::error::{Error, Result};
use crate::linalg::expm;

/// Axis-aligned polyline: a start point and signed moves along single axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPath {
    pub start: Vec<f64>,
    pub segments: Vec<(usize, f64)>,
}

impl GridPath {
    pub fn new(start: Vec<f64>, segments: Vec<(usize, f64)>) -> Self {
        GridPath { start, segments }
    }

    /// Counterclockwise boundary of the rectangle spanned by `sides` along
    /// `axes` from `corner`.
    pub fn rectangle(corner: &[f64], axes: (usize, usize), sides: (f64, f64)) -> Self {
        GridPath {
            start: corner.to_vec(),
            segments: vec![(axes.0, sides.0), (axes.1, sides.1), (axes.0, -sides.0), (axes.1, -sides.1)],
        }
    }

    /// Start point followed by the end of every segment.
    pub fn waypoints(&self) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(self.segments.len() + 1);
        let mut x = self.start.clone();
        out.push(x.clone());
        for &(axis, len) in &self.segments {
            x[axis] += len;
            out.push(x.clone());
        }
        out
    }

    pub fn end(&self) -> Vec<f64> {
        self.waypoints().pop().expect("at least the start point")
    }

    pub fn reversed(&self) -> Self {
        GridPath {
            start: self.end(),
            segments: self.segments.iter().rev().map(|&(a, l)| (a, -l)).collect(),
        }
    }

    /// `self` followed by `next`; `next` must start where `self` ends.
    pub fn then(&self, next: &GridPath) -> Result<Self> {
        let end = self.end();
        let gap = end
            .iter()
            .zip(&next.start)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if end.len() != next.start.len() || gap > 1e-12 {
            return Err(Error::invalid("paths do not meet"));
        }
        let mut segments = self.segments.clone();
        segments.extend_from_slice(&next.segments);
        Ok(GridPath {
            start: self.start.clone(),
            segments,
        })
    }

    fn validate(&self, field: &ConnectionField) -> Result<()> {
        let m = field.dim();
        if self.start.len() != m {
            return Err(Error::invalid(format!(
                "path start has dimension {}, chart has {m}",
                self.start.len()
            )));
        }
        if let Some(&(axis, _)) = self.segments.iter().find(|(a, _)| *a >= m) {
            return Err(Error::invalid(format!("segment axis {axis} out of range")));
        }
        if self.segments.iter().any(|(_, l)| !l.is_finite()) {
            return Err(Error::invalid("non-finite segment length"));
        }
        // Segments are axis-aligned and the chart is a box, so checking the
        // waypoints covers every intermediate point.
        for w in self.waypoints() {
            field.chart().require(&w)?;
        }
        Ok(())
    }
}

/// Ordered product of midpoint exponentials `exp(-w_axis(x_mid) * dt)`,
/// later substeps multiplying on the left. Each segment of length `L` gets
/// `ceil(|L| * steps_per_unit)` substeps.
pub fn transport_path(field: &ConnectionField, path: &GridPath, steps_per_unit: usize) -> Result<DMatrix<f64>> {
    if steps_per_unit == 0 {
        return Err(Error::invalid("steps_per_unit must be at least 1"));
    }
    path.validate(field)?;
    let k = field.fiber_dim();
    let mut p = DMatrix::identity(k, k);
    let mut x = path.start.clone();
    for &(axis, len) in &path.segments {
        if len == 0.0 {
            continue;
        }
        let n = ((len.abs() * steps_per_unit as f64).ceil() as usize).max(1);
        let dt = len / n as f64;
        let x0 = x[axis];
        for s in 0..n {
            x[axis] = x0 + (s as f64 + 0.5) * dt;
            let step = expm(&(field.omega_at(axis, &x) * (-dt)));
            p = step * p;
        }
        x[axis] = x0 + len;
    }
    Ok(p)
}

pub fn holonomy_loop(
    field: &ConnectionField,
    corner: &[f64],
    axes: (usize, usize),
    sides: (f64, f64),
    steps_per_unit: usize,
) -> Result<DMatrix<f64>> {
    check_loop_axes(field, axes)?;
    transport_path(field, &GridPath::rectangle(corner, axes, sides), steps_per_unit)
}

fn check_loop_axes(field: &ConnectionField, axes: (usize, usize)) -> Result<()> {
    let m = field.dim();
    if axes.0 >= m || axes.1 >= m || axes.0 == axes.1 {
        return Err(Error::invalid("loop needs two distinct in-range axes"));
    }
    Ok(())
}

/// Midpoint-rule integral of `F_ab` over the rectangle, with sub-cells no
/// larger than the chart spacing along each axis.
pub fn curvature_integral(
    curvature: &MatrixGrid,
    corner: &[f64],
    axes: (usize, usize),
    sides: (f64, f64),
) -> DMatrix<f64> {
    let chart = &curvature.chart;
    let na = ((sides.0.abs() / chart.spacing(axes.0)).ceil() as usize).max(1);
    let nb = ((sides.1.abs() / chart.spacing(axes.1)).ceil() as usize).max(1);
    let (da, db) = (sides.0 / na as f64, sides.1 / nb as f64);
    let (r, c) = curvature.data[0].shape();
    let mut sum = DMatrix::zeros(r, c);
    let mut x = corner.to_vec();
    for i in 0..na {
        x[axes.0] = corner[axes.0] + (i as f64 + 0.5) * da;
        for j in 0..nb {
            x[axes.1] = corner[axes.1] + (j as f64 + 0.5) * db;
            sum += curvature.interpolate(&x);
        }
    }
    sum * (da * db)
}

/// `|| holonomy - exp(-integral of F) ||_F` for the rectangle.
pub fn stokes_residual(
    field: &ConnectionField,
    corner: &[f64],
    axes: (usize, usize),
    sides: (f64, f64),
    steps_per_unit: usize,
) -> Result<f64> {
    let hol = holonomy_loop(field, corner, axes, sides, steps_per_unit)?;
    let f = field.curvature(axes.0, axes.1)?;
    let integral = curvature_integral(&f, corner, axes, sides);
    Ok((hol - expm(&(-integral))).norm())
}
