use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::chart::Chart;
use crate::error::{Error, Result};
use crate::exec::Exec;

pub const SIGN_CONVENTION: &str = "minus_omega";

/// Matrix-valued connection coefficients sampled on a chart grid.
///
/// `omega[j]` stores the `k x k` matrices of the coefficient along axis `j`,
/// node by node (last chart axis fastest), each matrix row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ConnectionField {
    chart: Chart,
    k: usize,
    omega: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    /// No parameters; every coefficient is zero.
    Flat,
    /// `m * k * k` parameters: one constant matrix per axis.
    Constant,
    /// Each entry of each axis matrix is a polynomial of total degree at
    /// most 2 in the chart coordinates: `m * k * k * monomials(m)` parameters.
    Polynomial,
    /// Polynomial parameters for `A`; returns `(A, -A^T)`.
    DualPair,
}

/// Number of monomials of total degree at most 2 in `m` variables.
pub fn monomial_count(m: usize) -> usize {
    (m + 1) * (m + 2) / 2
}

/// Monomials `1, x_0, .., x_{m-1}, x_i x_j (i <= j)` evaluated at `x`.
pub fn monomials(x: &[f64]) -> Vec<f64> {
    let m = x.len();
    let mut out = Vec::with_capacity(monomial_count(m));
    out.push(1.0);
    out.extend_from_slice(x);
    for i in 0..m {
        for j in i..m {
            out.push(x[i] * x[j]);
        }
    }
    out
}

pub fn generator_arity(generator: Generator, dim: usize, k: usize) -> usize {
    match generator {
        Generator::Flat => 0,
        Generator::Constant => dim * k * k,
        Generator::Polynomial | Generator::DualPair => dim * k * k * monomial_count(dim),
    }
}

/// Builds a field from a generator. `DualPair` returns the partner as the
/// second element; every other generator returns `None` there.
pub fn build_field(
    chart: &Chart,
    k: usize,
    generator: Generator,
    params: &[f64],
) -> Result<(ConnectionField, Option<ConnectionField>)> {
    if k == 0 {
        return Err(Error::invalid("fiber dimension must be at least 1"));
    }
    let m = chart.dim();
    let arity = generator_arity(generator, m, k);
    if params.len() != arity {
        return Err(Error::invalid(format!(
            "{generator:?} generator expects {arity} parameters, got {}",
            params.len()
        )));
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::invalid("non-finite generator parameter"));
    }
    let kk = k * k;
    match generator {
        Generator::Flat => Ok((ConnectionField::flat(chart.clone(), k), None)),
        Generator::Constant => {
            let f = ConnectionField::from_fn(chart.clone(), k, |axis, _| {
                DMatrix::from_row_slice(k, k, &params[axis * kk..(axis + 1) * kk])
            })?;
            Ok((f, None))
        }
        Generator::Polynomial | Generator::DualPair => {
            let nm = monomial_count(m);
            let a = ConnectionField::from_fn(chart.clone(), k, |axis, x| {
                let mono = monomials(x);
                DMatrix::from_fn(k, k, |r, c| {
                    let base = ((axis * kk) + r * k + c) * nm;
                    mono.iter().zip(&params[base..base + nm]).map(|(u, p)| u * p).sum()
                })
            })?;
            if generator == Generator::DualPair {
                let b = a.dual();
                Ok((a, Some(b)))
            } else {
                Ok((a, None))
            }
        }
    }
}

impl ConnectionField {
    pub fn flat(chart: Chart, k: usize) -> Self {
        let n = chart.node_count() * k * k;
        let omega = vec![vec![0.0; n]; chart.dim()];
        ConnectionField { chart, k, omega }
    }

    /// Samples `f(axis, coords)` at every node.
    pub fn from_fn(
        chart: Chart,
        k: usize,
        f: impl Fn(usize, &[f64]) -> DMatrix<f64>,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("fiber dimension must be at least 1"));
        }
        let mut omega = Vec::with_capacity(chart.dim());
        for axis in 0..chart.dim() {
            let mut data = Vec::with_capacity(chart.node_count() * k * k);
            for node in 0..chart.node_count() {
                let x = chart.node_coords(&chart.unflat(node));
                let w = f(axis, &x);
                if w.nrows() != k || w.ncols() != k {
                    return Err(Error::invalid(format!(
                        "generator returned {}x{} matrix for fiber dimension {k}",
                        w.nrows(),
                        w.ncols()
                    )));
                }
                for r in 0..k {
                    for c in 0..k {
                        data.push(w[(r, c)]);
                    }
                }
            }
            omega.push(data);
        }
        Self::from_raw(chart, k, omega)
    }

    pub fn from_raw(chart: Chart, k: usize, omega: Vec<Vec<f64>>) -> Result<Self> {
        if omega.len() != chart.dim() {
            return Err(Error::invalid("one coefficient grid per chart axis required"));
        }
        let expect = chart.node_count() * k * k;
        for (j, g) in omega.iter().enumerate() {
            if g.len() != expect {
                return Err(Error::invalid(format!(
                    "axis {j}: {} entries, expected {expect}",
                    g.len()
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("axis {j}: non-finite coefficient")));
            }
        }
        Ok(ConnectionField { chart, k, omega })
    }

    pub fn chart(&self) -> &Chart {
        &self.chart
    }

    pub fn fiber_dim(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.chart.dim()
    }

    pub fn raw(&self, axis: usize) -> &[f64] {
        &self.omega[axis]
    }

    pub fn omega_node(&self, axis: usize, node: usize) -> DMatrix<f64> {
        let kk = self.k * self.k;
        DMatrix::from_row_slice(self.k, self.k, &self.omega[axis][node * kk..(node + 1) * kk])
    }

    /// Multilinearly interpolated coefficient along `axis` at `x`.
    pub fn omega_at(&self, axis: usize, x: &[f64]) -> DMatrix<f64> {
        let kk = self.k * self.k;
        let mut out = DMatrix::zeros(self.k, self.k);
        for (node, w) in self.chart.stencil(x) {
            let s = &self.omega[axis][node * kk..(node + 1) * kk];
            for r in 0..self.k {
                for c in 0..self.k {
                    out[(r, c)] += w * s[r * self.k + c];
                }
            }
        }
        out
    }

    /// The partner field `-omega^T`, nodewise.
    pub fn dual(&self) -> Self {
        let k = self.k;
        let omega = self
            .omega
            .iter()
            .map(|g| {
                let mut out = vec![0.0; g.len()];
                for (node_out, node_in) in out.chunks_mut(k * k).zip(g.chunks(k * k)) {
                    for r in 0..k {
                        for c in 0..k {
                            node_out[r * k + c] = -node_in[c * k + r];
                        }
                    }
                }
                out
            })
            .collect();
        ConnectionField {
            chart: self.chart.clone(),
            k,
            omega,
        }
    }

    /// Nodewise `d(omega_axis)/d(x_dir)`: central differences inside,
    /// one-sided at the boundary.
    fn derivative(&self, axis: usize, dir: usize, idx: &[usize]) -> DMatrix<f64> {
        let n = self.chart.resolution()[dir];
        let h = self.chart.spacing(dir);
        let mut lo = idx.to_vec();
        let mut hi = idx.to_vec();
        let i = idx[dir];
        let span = if i == 0 {
            hi[dir] = 1;
            h
        } else if i + 1 == n {
            lo[dir] = n - 2;
            h
        } else {
            lo[dir] = i - 1;
            hi[dir] = i + 1;
            2.0 * h
        };
        (self.omega_node(axis, self.chart.flat(&hi)) - self.omega_node(axis, self.chart.flat(&lo))) / span
    }

    pub fn curvature(&self, axis_a: usize, axis_b: usize) -> Result<MatrixGrid> {
        self.curvature_with(Exec::default(), axis_a, axis_b)
    }

    /// `F_ab = d_a w_b - d_b w_a + [w_a, w_b]` at every node.
    pub fn curvature_with(&self, exec: Exec, axis_a: usize, axis_b: usize) -> Result<MatrixGrid> {
        let m = self.dim();
        if axis_a >= m || axis_b >= m {
            return Err(Error::invalid(format!("axis out of range for chart of dimension {m}")));
        }
        if axis_a == axis_b {
            return Err(Error::invalid("curvature needs two distinct axes"));
        }
        if axis_a > axis_b {
            // computed once in canonical order so that F_ba = -F_ab exactly
            let mut g = self.curvature_with(exec, axis_b, axis_a)?;
            g.data.iter_mut().for_each(|m| m.neg_mut());
            return Ok(g);
        }
        let data = exec.map(self.chart.node_count(), |node| {
            let idx = self.chart.unflat(node);
            let wa = self.omega_node(axis_a, node);
            let wb = self.omega_node(axis_b, node);
            self.derivative(axis_b, axis_a, &idx) - self.derivative(axis_a, axis_b, &idx) + &wa * &wb - &wb * &wa
        });
        Ok(MatrixGrid {
            chart: self.chart.clone(),
            data,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&FieldJson::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let raw: FieldJson = serde_json::from_str(s)?;
        raw.try_into()
    }
}

/// One `k x k` matrix per chart node.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixGrid {
    pub chart: Chart,
    pub data: Vec<DMatrix<f64>>,
}

impl MatrixGrid {
    pub fn at(&self, idx: &[usize]) -> &DMatrix<f64> {
        &self.data[self.chart.flat(idx)]
    }

    pub fn interpolate(&self, x: &[f64]) -> DMatrix<f64> {
        let (r, c) = self.data[0].shape();
        self.chart
            .stencil(x)
            .into_iter()
            .fold(DMatrix::zeros(r, c), |acc, (n, w)| acc + &self.data[n] * w)
    }

    /// Largest Frobenius norm over interior nodes (all nodes when the grid
    /// has no interior).
    pub fn max_norm_interior(&self) -> f64 {
        let mut any = false;
        let mut best = 0.0f64;
        for (n, m) in self.data.iter().enumerate() {
            if self.chart.is_interior(&self.chart.unflat(n)) {
                any = true;
                best = best.max(m.norm());
            }
        }
        if any {
            best
        } else {
            self.data.iter().map(|m| m.norm()).fold(0.0, f64::max)
        }
    }

    /// Largest Frobenius norm of `self - other` over interior nodes.
    pub fn max_diff_interior(&self, other: &MatrixGrid, map: impl Fn(&DMatrix<f64>) -> DMatrix<f64>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .enumerate()
            .filter(|(n, _)| self.chart.is_interior(&self.chart.unflat(*n)))
            .map(|(_, (a, b))| (a - map(b)).norm())
            .fold(0.0, f64::max)
    }
}

#[derive(Serialize, Deserialize)]
struct FieldJson {
    chart: Chart,
    fiber_dim: usize,
    sign_convention: String,
    /// Axis-major, then node (last chart axis fastest), then row-major entry.
    omega: Vec<f64>,
}

impl From<&ConnectionField> for FieldJson {
    fn from(f: &ConnectionField) -> Self {
        FieldJson {
            chart: f.chart.clone(),
            fiber_dim: f.k,
            sign_convention: SIGN_CONVENTION.to_string(),
            omega: f.omega.concat(),
        }
    }
}

impl TryFrom<FieldJson> for ConnectionField {
    type Error = Error;
    fn try_from(raw: FieldJson) -> Result<Self> {
        if raw.sign_convention != SIGN_CONVENTION {
            return Err(Error::invalid(format!(
                "unsupported sign convention {:?}",
                raw.sign_convention
            )));
        }
        if raw.fiber_dim == 0 {
            return Err(Error::invalid("fiber dimension must be at least 1"));
        }
        let per_axis = raw.chart.node_count() * raw.fiber_dim * raw.fiber_dim;
        if raw.omega.len() != per_axis * raw.chart.dim() {
            return Err(Error::invalid(format!(
                "omega has {} entries, expected {}",
                raw.omega.len(),
                per_axis * raw.chart.dim()
            )));
        }
        let omega = raw.omega.chunks(per_axis).map(<[f64]>::to_vec).collect();
        ConnectionField::from_raw(raw.chart, raw.fiber_dim, omega)
    }
}
