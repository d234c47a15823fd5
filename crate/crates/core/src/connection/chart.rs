use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box of local coordinates with a regular node grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawChart", into = "RawChart")]
pub struct Chart {
    mins: Vec<f64>,
    maxs: Vec<f64>,
    resolution: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct RawChart {
    mins: Vec<f64>,
    maxs: Vec<f64>,
    resolution: Vec<usize>,
}

impl TryFrom<RawChart> for Chart {
    type Error = Error;
    fn try_from(r: RawChart) -> Result<Self> {
        Chart::new(r.mins, r.maxs, r.resolution)
    }
}

impl From<Chart> for RawChart {
    fn from(c: Chart) -> Self {
        RawChart {
            mins: c.mins,
            maxs: c.maxs,
            resolution: c.resolution,
        }
    }
}

/// Relative slack when testing whether a point lies in the chart.
const DOMAIN_TOL: f64 = 1e-12;

impl Chart {
    pub fn new(mins: Vec<f64>, maxs: Vec<f64>, resolution: Vec<usize>) -> Result<Self> {
        let m = mins.len();
        if m == 0 || maxs.len() != m || resolution.len() != m {
            return Err(Error::invalid("chart bounds and resolution must share a non-zero length"));
        }
        for j in 0..m {
            if !(mins[j].is_finite() && maxs[j].is_finite() && mins[j] < maxs[j]) {
                return Err(Error::invalid(format!("chart axis {j}: need finite mins < maxs")));
            }
            if resolution[j] < 2 {
                return Err(Error::invalid(format!("chart axis {j}: resolution must be at least 2")));
            }
        }
        Ok(Chart { mins, maxs, resolution })
    }

    /// Square chart `[lo, hi]^dim` with `n` nodes per axis.
    pub fn cube(dim: usize, lo: f64, hi: f64, n: usize) -> Result<Self> {
        Chart::new(vec![lo; dim], vec![hi; dim], vec![n; dim])
    }

    pub fn dim(&self) -> usize {
        self.mins.len()
    }

    pub fn mins(&self) -> &[f64] {
        &self.mins
    }

    pub fn maxs(&self) -> &[f64] {
        &self.maxs
    }

    pub fn resolution(&self) -> &[usize] {
        &self.resolution
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        (self.maxs[axis] - self.mins[axis]) / (self.resolution[axis] - 1) as f64
    }

    pub fn node_count(&self) -> usize {
        self.resolution.iter().product()
    }

    /// Flat node index, last axis fastest.
    pub fn flat(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(&self.resolution)
            .fold(0, |acc, (&i, &n)| acc * n + i)
    }

    pub fn unflat(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for j in (0..self.dim()).rev() {
            idx[j] = flat % self.resolution[j];
            flat /= self.resolution[j];
        }
        idx
    }

    pub fn node_coords(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter()
            .enumerate()
            .map(|(j, &i)| self.mins[j] + i as f64 * self.spacing(j))
            .collect()
    }

    /// `true` for nodes with no boundary index.
    pub fn is_interior(&self, idx: &[usize]) -> bool {
        idx.iter()
            .zip(&self.resolution)
            .all(|(&i, &n)| i > 0 && i + 1 < n)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter().enumerate().all(|(j, &v)| {
                let slack = DOMAIN_TOL * (self.maxs[j] - self.mins[j]);
                v.is_finite() && v >= self.mins[j] - slack && v <= self.maxs[j] + slack
            })
    }

    pub fn require(&self, x: &[f64]) -> Result<()> {
        if self.contains(x) {
            Ok(())
        } else {
            Err(Error::OutOfDomain { point: x.to_vec() })
        }
    }

    /// Multilinear interpolation stencil: `(flat node, weight)` pairs.
    /// The point is clamped into the chart first.
    pub fn stencil(&self, x: &[f64]) -> Vec<(usize, f64)> {
        let m = self.dim();
        let mut base = vec![0usize; m];
        let mut frac = vec![0.0; m];
        for j in 0..m {
            let h = self.spacing(j);
            let t = ((x[j] - self.mins[j]) / h).clamp(0.0, (self.resolution[j] - 1) as f64);
            let i = (t.floor() as usize).min(self.resolution[j] - 2);
            base[j] = i;
            frac[j] = t - i as f64;
        }
        let mut out = Vec::with_capacity(1 << m);
        let mut corner = vec![0usize; m];
        for mask in 0..(1usize << m) {
            let mut w = 1.0;
            for j in 0..m {
                let bit = (mask >> j) & 1;
                corner[j] = base[j] + bit;
                w *= if bit == 1 { frac[j] } else { 1.0 - frac[j] };
            }
            if w != 0.0 {
                out.push((self.flat(&corner), w));
            }
        }
        out
    }
}
