use serde::{Deserialize, Serialize};

use super::chart::Chart;
use crate::error::{Error, Result};

/// Christoffel symbols of a tangent-bundle connection sampled on a chart.
///
/// Per node the `m^3` values are stored with `gamma[k*m*m + i*m + j]` holding
/// `Gamma^k_{ij}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineField {
    chart: Chart,
    gamma: Vec<f64>,
}

/// Index of `(upper k, lower i, lower j)` in an `m^3` array.
pub fn tidx(m: usize, k: usize, i: usize, j: usize) -> usize {
    k * m * m + i * m + j
}

impl AffineField {
    pub fn new(chart: Chart, gamma: Vec<f64>) -> Result<Self> {
        let m = chart.dim();
        let expect = chart.node_count() * m * m * m;
        if gamma.len() != expect {
            return Err(Error::invalid(format!(
                "{} Christoffel entries, expected {expect}",
                gamma.len()
            )));
        }
        if gamma.iter().any(|g| !g.is_finite()) {
            return Err(Error::invalid("non-finite Christoffel symbol"));
        }
        Ok(AffineField { chart, gamma })
    }

    /// Samples `f(coords)` (an `m^3` array) at every node.
    pub fn from_fn(chart: Chart, f: impl Fn(&[f64]) -> Vec<f64>) -> Result<Self> {
        let m3 = chart.dim().pow(3);
        let mut gamma = Vec::with_capacity(chart.node_count() * m3);
        for node in 0..chart.node_count() {
            let g = f(&chart.node_coords(&chart.unflat(node)));
            if g.len() != m3 {
                return Err(Error::invalid(format!("node array has {} entries, expected {m3}", g.len())));
            }
            gamma.extend(g);
        }
        Self::new(chart, gamma)
    }

    pub fn constant(chart: Chart, g: &[f64]) -> Result<Self> {
        Self::from_fn(chart, |_| g.to_vec())
    }

    pub fn chart(&self) -> &Chart {
        &self.chart
    }

    pub fn dim(&self) -> usize {
        self.chart.dim()
    }

    pub fn gamma_node(&self, node: usize) -> &[f64] {
        let m3 = self.dim().pow(3);
        &self.gamma[node * m3..(node + 1) * m3]
    }

    pub fn gamma_at(&self, x: &[f64]) -> Vec<f64> {
        let m3 = self.dim().pow(3);
        let mut out = vec![0.0; m3];
        for (node, w) in self.chart.stencil(x) {
            for (o, g) in out.iter_mut().zip(self.gamma_node(node)) {
                *o += w * g;
            }
        }
        out
    }

    /// Torsion at an interpolated point.
    pub fn torsion_at(&self, x: &[f64]) -> Vec<f64> {
        antisymmetrize(self.dim(), &self.gamma_at(x))
    }
}

fn antisymmetrize(m: usize, g: &[f64]) -> Vec<f64> {
    let mut t = vec![0.0; g.len()];
    for k in 0..m {
        for i in 0..m {
            for j in 0..m {
                t[tidx(m, k, i, j)] = g[tidx(m, k, i, j)] - g[tidx(m, k, j, i)];
            }
        }
    }
    t
}

/// `T^k_{ij} = Gamma^k_{ij} - Gamma^k_{ji}` at every node, in the coordinate
/// frame.
pub fn torsion(field: &AffineField) -> Vec<Vec<f64>> {
    let m = field.dim();
    (0..field.chart.node_count())
        .map(|n| antisymmetrize(m, field.gamma_node(n)))
        .collect()
}

/// Contracts an `m^3` torsion array with two vectors: `T(X, Y)^k`.
pub fn apply_torsion(m: usize, t: &[f64], x: &[f64], y: &[f64]) -> Vec<f64> {
    (0..m)
        .map(|k| {
            let mut s = 0.0;
            for i in 0..m {
                for j in 0..m {
                    s += t[tidx(m, k, i, j)] * x[i] * y[j];
                }
            }
            s
        })
        .collect()
}

/// Central-difference derivative of the torsion along `axis` at `x`, step
/// half a grid spacing; one-sided when a side would leave the chart.
fn torsion_derivative(field: &AffineField, axis: usize, x: &[f64]) -> Vec<f64> {
    let chart = field.chart();
    let h = 0.5 * chart.spacing(axis);
    let mut lo = x.to_vec();
    let mut hi = x.to_vec();
    lo[axis] = (x[axis] - h).max(chart.mins()[axis]);
    hi[axis] = (x[axis] + h).min(chart.maxs()[axis]);
    let span = hi[axis] - lo[axis];
    field
        .torsion_at(&hi)
        .iter()
        .zip(field.torsion_at(&lo))
        .map(|(a, b)| (a - b) / span)
        .collect()
}

/// Cyclic sum `[[X,Y]_T, Z]_T + [[Y,Z]_T, X]_T + [[Z,X]_T, Y]_T` at `probe`
/// for constant vector fields, where `[U,V]_T = [U,V] + T(U,V)`.
///
/// For constant `X, Y` the inner bracket is the field `W = T(X,Y)`; the outer
/// Lie bracket then reduces to `-(Z . grad) W`.
pub fn twisted_jacobiator(field: &AffineField, x: &[f64], y: &[f64], z: &[f64], probe: &[f64]) -> Result<Vec<f64>> {
    let m = field.dim();
    if x.len() != m || y.len() != m || z.len() != m {
        return Err(Error::invalid(format!("vector fields must have dimension {m}")));
    }
    field.chart().require(probe)?;
    let t = field.torsion_at(probe);
    let dt: Vec<Vec<f64>> = (0..m).map(|l| torsion_derivative(field, l, probe)).collect();
    let mut out = vec![0.0; m];
    for (a, b, c) in [(x, y, z), (y, z, x), (z, x, y)] {
        let w = apply_torsion(m, &t, a, b);
        let twist = apply_torsion(m, &t, &w, c);
        for k in 0..m {
            let lie: f64 = (0..m).map(|l| c[l] * apply_torsion(m, &dt[l], a, b)[k]).sum();
            out[k] += twist[k] - lie;
        }
    }
    Ok(out)
}
