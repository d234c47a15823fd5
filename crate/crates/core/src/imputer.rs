//! Missing-data imputation by parallel transport on a mask-induced foliation.
//!
//! A mask splits the coordinates into observed and missing ones. A
//! connection with polynomial coefficients (degree at most 2) lives on the
//! chart of missing coordinates, normalised to `[-1, 1]^q`. To impute, the
//! missing coordinates of the sample nearest in the observed coordinates are
//! transported as a vector along a monotone staircase from the corner
//! `(-1, .., -1)` to `(1, .., 1)`, then snapped onto a local linear model of
//! the data and the observed coordinates are written back.
//!
//! Fitting minimises the mean squared imputation error plus `lambda` times
//! the mean squared curvature at the plaquette centres of the path grid.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::linalg::{expm, null_space};

/// Samples in a local neighbourhood for the tangent-plane snap.
pub const SNAP_NEIGHBOURS: usize = 10;
/// Integration substeps per grid cell of a staircase.
pub const SUBSTEPS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Plane,
    CurvedSurface,
}

/// The noise-free generator of a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub enum Surface {
    /// `normals^T (x - origin) = 0`, normals orthonormal.
    Plane { origin: DVector<f64>, normals: DMatrix<f64> },
    /// `x_j = c_j . (1, t1, t2, t1^2, t1 t2, t2^2)` for `j >= 2`, with
    /// `(t1, t2) = (x_0, x_1)`.
    Graph { coeffs: Vec<[f64; 6]> },
}

impl Surface {
    /// Root mean square of the defining equations at `x`.
    pub fn residual(&self, x: &DVector<f64>) -> f64 {
        let r: Vec<f64> = match self {
            Surface::Plane { origin, normals } => (normals.transpose() * (x - origin)).iter().copied().collect(),
            Surface::Graph { coeffs } => coeffs
                .iter()
                .enumerate()
                .map(|(j, c)| x[j + 2] - graph_value(c, x[0], x[1]))
                .collect(),
        };
        (r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64).sqrt()
    }
}

fn graph_value(c: &[f64; 6], t1: f64, t2: f64) -> f64 {
    c[0] + c[1] * t1 + c[2] * t2 + c[3] * t1 * t1 + c[4] * t1 * t2 + c[5] * t2 * t2
}

/// Fully observed training data.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "RawDataset", into = "RawDataset")]
pub struct Dataset {
    samples: Vec<DVector<f64>>,
    manifold_dim: usize,
    generator_tag: String,
    surface: Option<Surface>,
}

#[derive(Serialize, Deserialize)]
struct RawDataset {
    samples: Vec<Vec<f64>>,
    manifold_dim: usize,
    #[serde(default)]
    generator_tag: String,
}

impl TryFrom<RawDataset> for Dataset {
    type Error = Error;
    fn try_from(r: RawDataset) -> Result<Self> {
        Dataset::new(r.samples.into_iter().map(DVector::from_vec).collect(), r.manifold_dim, r.generator_tag)
    }
}

impl From<Dataset> for RawDataset {
    fn from(d: Dataset) -> Self {
        RawDataset {
            samples: d.samples.iter().map(|s| s.iter().copied().collect()).collect(),
            manifold_dim: d.manifold_dim,
            generator_tag: d.generator_tag,
        }
    }
}

impl Dataset {
    pub fn new(samples: Vec<DVector<f64>>, manifold_dim: usize, generator_tag: impl Into<String>) -> Result<Self> {
        if samples.len() < 10 {
            return Err(Error::invalid(format!("dataset needs at least 10 samples, got {}", samples.len())));
        }
        let d = samples[0].len();
        if d < 2 {
            return Err(Error::invalid("samples need at least 2 coordinates"));
        }
        if let Some(i) = samples.iter().position(|s| s.len() != d) {
            return Err(Error::invalid(format!("sample {i} has {} coordinates, expected {d}", samples[i].len())));
        }
        if let Some(i) = samples.iter().position(|s| !s.iter().all(|v| v.is_finite())) {
            return Err(Error::invalid(format!("sample {i} has non-finite entries")));
        }
        if manifold_dim == 0 || manifold_dim >= d {
            return Err(Error::invalid("manifold dimension must lie in 1..d"));
        }
        Ok(Dataset {
            samples,
            manifold_dim,
            generator_tag: generator_tag.into(),
            surface: None,
        })
    }

    pub fn samples(&self) -> &[DVector<f64>] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples[0].len()
    }

    pub fn manifold_dim(&self) -> usize {
        self.manifold_dim
    }

    pub fn generator_tag(&self) -> &str {
        &self.generator_tag
    }

    /// The generating surface, for synthetic datasets.
    pub fn surface(&self) -> Option<&Surface> {
        self.surface.as_ref()
    }
}

/// Samples `n` points of a 2-dimensional surface in `R^d` with parameters
/// uniform in `[-1, 1]^2`, plus i.i.d. Gaussian noise of standard deviation
/// `noise` on every coordinate.
pub fn make_dataset(kind: DatasetKind, n: usize, d: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 10 || d < 3 {
        return Err(Error::invalid("make_dataset needs n >= 10 and d >= 3"));
    }
    if !(noise >= 0.0) || !noise.is_finite() {
        return Err(Error::invalid("noise must be finite and non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (surface, tag) = match kind {
        DatasetKind::Plane => {
            let g = DMatrix::<f64>::from_fn(d, 2, |_, _| rng.sample(StandardNormal));
            let basis = g.qr().q();
            let origin = DVector::<f64>::from_fn(d, |_, _| 0.5 * rng.sample::<f64, _>(StandardNormal));
            let normals = null_space(&basis.transpose());
            let normals = DMatrix::from_columns(&normals);
            (Surface::Plane { origin, normals }, "plane")
        }
        DatasetKind::CurvedSurface => {
            let coeffs = (2..d).map(|_| std::array::from_fn(|_| rng.random_range(-0.5..0.5))).collect();
            (Surface::Graph { coeffs }, "curved_surface")
        }
    };
    let tangent = match &surface {
        Surface::Plane { normals, .. } => DMatrix::from_columns(&null_space(&normals.transpose())),
        Surface::Graph { .. } => DMatrix::zeros(0, 0),
    };
    let samples = (0..n)
        .map(|_| {
            let t1: f64 = rng.random_range(-1.0..1.0);
            let t2: f64 = rng.random_range(-1.0..1.0);
            let clean = match &surface {
                Surface::Plane { origin, .. } => origin + &tangent * DVector::from_vec(vec![t1, t2]),
                Surface::Graph { coeffs } => {
                    let mut x = DVector::zeros(d);
                    x[0] = t1;
                    x[1] = t2;
                    for (j, c) in coeffs.iter().enumerate() {
                        x[j + 2] = graph_value(c, t1, t2);
                    }
                    x
                }
            };
            clean + DVector::from_fn(d, |_, _| noise * rng.sample::<f64, _>(StandardNormal))
        })
        .collect();
    let mut data = Dataset::new(samples, 2, tag)?;
    data.surface = Some(surface);
    Ok(data)
}

/// `bits[j]` is true when coordinate `j` is observed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Mask {
    bits: Vec<bool>,
}

impl TryFrom<String> for Mask {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        Mask::parse(&s)
    }
}

impl From<Mask> for String {
    fn from(m: Mask) -> Self {
        m.to_bitstring()
    }
}

impl Mask {
    pub fn new(bits: Vec<bool>) -> Result<Self> {
        if !bits.iter().any(|&b| b) || bits.iter().all(|&b| b) {
            return Err(Error::invalid("mask needs at least one observed and one missing coordinate"));
        }
        Ok(Mask { bits })
    }

    /// Parses a string of `0` and `1`, e.g. `"10100"`.
    pub fn parse(s: &str) -> Result<Self> {
        let bits = s
            .chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                other => Err(Error::invalid(format!("mask character {other:?} is not 0 or 1"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Mask::new(bits)
    }

    pub fn to_bitstring(&self) -> String {
        self.bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn dim(&self) -> usize {
        self.bits.len()
    }

    pub fn observed(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&j| self.bits[j]).collect()
    }

    pub fn missing(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&j| !self.bits[j]).collect()
    }
}

/// `(F1_axes, F2_axes)`: moving along a leaf of the first foliation changes
/// only the missing coordinates, along the second only the observed ones.
/// Indices are 0-based.
pub fn build_mask_foliations(mask: &Mask) -> (Vec<usize>, Vec<usize>) {
    (mask.missing(), mask.observed())
}

/// Exponent vectors of all monomials in `q` variables of degree at most
/// `degree` (0, 1 or 2), constant first.
pub fn monomials(q: usize, degree: u32) -> Vec<Vec<u32>> {
    let mut out = vec![vec![0; q]];
    if degree >= 1 {
        for i in 0..q {
            let mut e = vec![0; q];
            e[i] = 1;
            out.push(e);
        }
    }
    if degree >= 2 {
        for i in 0..q {
            for j in i..q {
                let mut e = vec![0; q];
                e[i] += 1;
                e[j] += 1;
                out.push(e);
            }
        }
    }
    out
}

fn mono_value(e: &[u32], x: &[f64]) -> f64 {
    e.iter().zip(x).map(|(&p, &v)| v.powi(p as i32)).product()
}

fn mono_partial(e: &[u32], a: usize, x: &[f64]) -> f64 {
    if e[a] == 0 {
        return 0.0;
    }
    let mut lowered = e.to_vec();
    lowered[a] -= 1;
    e[a] as f64 * mono_value(&lowered, x)
}

/// Random monotone lattice path through `cells` unit steps per axis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Staircase {
    pub cells: usize,
    /// Axis of each unit step, in order.
    pub steps: Vec<usize>,
}

impl Staircase {
    /// Uniform over the orderings of the step multiset.
    pub fn random<R: Rng + ?Sized>(q: usize, cells: usize, rng: &mut R) -> Self {
        let mut steps: Vec<usize> = (0..q).flat_map(|a| std::iter::repeat_n(a, cells)).collect();
        steps.shuffle(rng);
        Staircase { cells, steps }
    }

    /// All steps along axis 0, then axis 1, and so on.
    pub fn axis_order(q: usize, cells: usize) -> Self {
        Staircase {
            cells,
            steps: (0..q).flat_map(|a| std::iter::repeat_n(a, cells)).collect(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FitReport {
    /// Total loss after each accepted step, starting with the initial loss.
    pub loss_trace: Vec<f64>,
    /// Reconstruction term of the zero connection.
    pub baseline_loss: f64,
    pub recon_loss: f64,
    pub curvature_norm: f64,
    pub iterations: usize,
}

/// Polynomial connection `omega_a(x) = sum_m C[a][m] x^m` on the normalised
/// missing-coordinate chart.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LearnedConnection {
    mask: Mask,
    lo: Vec<f64>,
    hi: Vec<f64>,
    degree: u32,
    cells: usize,
    monomials: Vec<Vec<u32>>,
    /// Axis-major: `coeffs[a * monomials.len() + m]`.
    coeffs: Vec<DMatrix<f64>>,
    pub lambda: f64,
    pub fit_report: FitReport,
}

impl LearnedConnection {
    /// Zero connection on the bounding box of the missing coordinates of
    /// `data`. `cells` is the staircase resolution per axis.
    pub fn zero(data: &Dataset, mask: &Mask, degree: u32, cells: usize) -> Result<Self> {
        if mask.dim() != data.dim() {
            return Err(Error::invalid(format!("mask has {} bits, data has {} coordinates", mask.dim(), data.dim())));
        }
        if degree > 2 {
            return Err(Error::invalid("polynomial degree must be at most 2"));
        }
        if cells == 0 {
            return Err(Error::invalid("staircase needs at least one cell per axis"));
        }
        let missing = mask.missing();
        let q = missing.len();
        let lo: Vec<f64> = missing
            .iter()
            .map(|&j| data.samples.iter().map(|s| s[j]).fold(f64::INFINITY, f64::min))
            .collect();
        let hi: Vec<f64> = missing
            .iter()
            .map(|&j| data.samples.iter().map(|s| s[j]).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let monomials = monomials(q, degree);
        let coeffs = vec![DMatrix::zeros(q, q); q * monomials.len()];
        Ok(LearnedConnection {
            mask: mask.clone(),
            lo,
            hi,
            degree,
            cells,
            monomials,
            coeffs,
            lambda: 0.0,
            fit_report: FitReport::default(),
        })
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    /// Number of missing coordinates (chart dimension and fibre rank).
    pub fn q(&self) -> usize {
        self.lo.len()
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn degree(&self) -> u32 {
        self.degree
    }

    pub fn monomials(&self) -> &[Vec<u32>] {
        &self.monomials
    }

    pub fn coeffs(&self) -> &[DMatrix<f64>] {
        &self.coeffs
    }

    /// Sets the coefficient of `x^exponents` in `omega_axis`.
    pub fn set_term(&mut self, axis: usize, exponents: &[u32], matrix: DMatrix<f64>) -> Result<()> {
        let q = self.q();
        if axis >= q || matrix.shape() != (q, q) {
            return Err(Error::invalid(format!("term must be a {q}x{q} matrix on an axis below {q}")));
        }
        let m = self
            .monomials
            .iter()
            .position(|e| e == exponents)
            .ok_or_else(|| Error::invalid(format!("monomial {exponents:?} is not in the basis")))?;
        if !matrix.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("coefficients must be finite"));
        }
        self.coeffs[axis * self.monomials.len() + m] = matrix;
        Ok(())
    }

    /// Chart coordinates in `[-1, 1]^q` of raw missing-coordinate values.
    pub fn normalise(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(v, (lo, hi))| {
                let half = 0.5 * (hi - lo);
                if half > 0.0 { (v - 0.5 * (lo + hi)) / half } else { 0.0 }
            })
            .collect()
    }

    fn omega_with(&self, coeffs: &[DMatrix<f64>], a: usize, x: &[f64]) -> DMatrix<f64> {
        let nm = self.monomials.len();
        let q = self.q();
        let mut w = DMatrix::zeros(q, q);
        for (m, e) in self.monomials.iter().enumerate() {
            let v = mono_value(e, x);
            if v != 0.0 {
                w += &coeffs[a * nm + m] * v;
            }
        }
        w
    }

    pub fn omega(&self, a: usize, x: &[f64]) -> DMatrix<f64> {
        self.omega_with(&self.coeffs, a, x)
    }

    fn domega_with(&self, coeffs: &[DMatrix<f64>], b: usize, a: usize, x: &[f64]) -> DMatrix<f64> {
        let nm = self.monomials.len();
        let q = self.q();
        let mut w = DMatrix::zeros(q, q);
        for (m, e) in self.monomials.iter().enumerate() {
            let v = mono_partial(e, a, x);
            if v != 0.0 {
                w += &coeffs[b * nm + m] * v;
            }
        }
        w
    }

    fn curvature_with(&self, coeffs: &[DMatrix<f64>], a: usize, b: usize, x: &[f64]) -> DMatrix<f64> {
        let wa = self.omega_with(coeffs, a, x);
        let wb = self.omega_with(coeffs, b, x);
        self.domega_with(coeffs, b, a, x) - self.domega_with(coeffs, a, b, x) + &wa * &wb - &wb * &wa
    }

    /// `F_ab = d_a omega_b - d_b omega_a + [omega_a, omega_b]` at chart
    /// point `x`, exact for the polynomial field.
    pub fn curvature(&self, a: usize, b: usize, x: &[f64]) -> DMatrix<f64> {
        self.curvature_with(&self.coeffs, a, b, x)
    }

    /// Plaquette centres of the staircase grid.
    fn lattice(&self) -> Vec<Vec<f64>> {
        let q = self.q();
        let c = self.cells;
        let total = c.pow(q as u32);
        (0..total)
            .map(|mut idx| {
                let mut x = vec![0.0; q];
                for xa in x.iter_mut().rev() {
                    *xa = -1.0 + (2.0 * (idx % c) as f64 + 1.0) / c as f64;
                    idx /= c;
                }
                x
            })
            .collect()
    }

    fn curvature_energy(&self, coeffs: &[DMatrix<f64>], grad: Option<&mut [DMatrix<f64>]>) -> f64 {
        let q = self.q();
        let nm = self.monomials.len();
        let lattice = self.lattice();
        let scale = 1.0 / lattice.len() as f64;
        let mut energy = 0.0;
        let mut grad = grad;
        for x in &lattice {
            for a in 0..q {
                for b in a + 1..q {
                    let f = self.curvature_with(coeffs, a, b, x);
                    energy += f.norm_squared() * scale;
                    if let Some(g) = grad.as_deref_mut() {
                        let phi = &f * (2.0 * scale);
                        let wa = self.omega_with(coeffs, a, x);
                        let wb = self.omega_with(coeffs, b, x);
                        let ca = &phi * wb.transpose() - wb.transpose() * &phi;
                        let cb = wa.transpose() * &phi - &phi * wa.transpose();
                        for (m, e) in self.monomials.iter().enumerate() {
                            let mu = mono_value(e, x);
                            g[a * nm + m] += &phi * (-mono_partial(e, b, x)) + &ca * mu;
                            g[b * nm + m] += &phi * mono_partial(e, a, x) + &cb * mu;
                        }
                    }
                }
            }
        }
        energy
    }

    /// Root mean square of `|F_ab|_F` summed over `a < b`, taken over the
    /// plaquette centres.
    pub fn curvature_norm(&self) -> f64 {
        self.curvature_energy(&self.coeffs, None).sqrt()
    }

    fn factors(&self, coeffs: &[DMatrix<f64>], path: &Staircase) -> Vec<(usize, Vec<f64>, DMatrix<f64>)> {
        let q = self.q();
        let delta = 2.0 / (path.cells * SUBSTEPS) as f64;
        let mut pos = vec![-1.0; q];
        let mut out = Vec::with_capacity(path.steps.len() * SUBSTEPS);
        for &a in &path.steps {
            let start = pos[a];
            for k in 0..SUBSTEPS {
                let mut mid = pos.clone();
                mid[a] = start + (k as f64 + 0.5) * delta;
                let e = expm(&(self.omega_with(coeffs, a, &mid) * -delta));
                out.push((a, mid, e));
            }
            pos[a] = start + 2.0 / path.cells as f64;
        }
        out
    }

    /// Transport matrix `P` along the staircase: `dP/dt = -omega(gamma') P`,
    /// midpoint exponentials with [`SUBSTEPS`] per cell.
    pub fn transport(&self, path: &Staircase) -> DMatrix<f64> {
        transport_of(&self.factors(&self.coeffs, path), self.q())
    }

    /// Adds `dL/dC` to `grad` given `dL/dP` for the transport along `path`.
    fn transport_backprop(&self, coeffs: &[DMatrix<f64>], path: &Staircase, dp: &DMatrix<f64>, grad: &mut [DMatrix<f64>]) {
        let q = self.q();
        let nm = self.monomials.len();
        let delta = 2.0 / (path.cells * SUBSTEPS) as f64;
        let factors = self.factors(coeffs, path);
        let mut prefix = Vec::with_capacity(factors.len() + 1);
        prefix.push(DMatrix::identity(q, q));
        for (_, _, e) in &factors {
            let next = e * prefix.last().expect("non-empty");
            prefix.push(next);
        }
        let mut suffix = DMatrix::identity(q, q);
        for s in (0..factors.len()).rev() {
            let (a, mid, e) = &factors[s];
            let g = suffix.transpose() * dp * prefix[s].transpose();
            let x = self.omega_with(coeffs, *a, mid) * -delta;
            let da = frechet_exp(&x.transpose(), &g) * -delta;
            for (m, ex) in self.monomials.iter().enumerate() {
                let mu = mono_value(ex, mid);
                if mu != 0.0 {
                    grad[a * nm + m] += &da * mu;
                }
            }
            suffix = &suffix * e;
        }
    }
}

fn transport_of(factors: &[(usize, Vec<f64>, DMatrix<f64>)], q: usize) -> DMatrix<f64> {
    factors.iter().fold(DMatrix::identity(q, q), |p, (_, _, e)| e * p)
}

/// Frechet derivative of the matrix exponential at `x` in direction `h`,
/// read off the upper-right block of `exp([[x, h], [0, x]])`.
pub fn frechet_exp(x: &DMatrix<f64>, h: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let mut big = DMatrix::zeros(2 * n, 2 * n);
    big.view_mut((0, 0), (n, n)).copy_from(x);
    big.view_mut((n, n), (n, n)).copy_from(x);
    big.view_mut((0, n), (n, n)).copy_from(h);
    expm(&big).view((0, n), (n, n)).into_owned()
}

fn sqdist(a: &DVector<f64>, b: &DVector<f64>, idx: Option<&[usize]>) -> f64 {
    match idx {
        Some(idx) => idx.iter().map(|&j| (a[j] - b[j]).powi(2)).sum(),
        None => (a - b).norm_squared(),
    }
}

fn nearest(data: &Dataset, x: &DVector<f64>, idx: Option<&[usize]>, exclude: Option<usize>) -> usize {
    let mut best = (f64::INFINITY, usize::MAX);
    for (i, s) in data.samples.iter().enumerate() {
        if Some(i) == exclude {
            continue;
        }
        let d = sqdist(s, x, idx);
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

/// Affine plane `c + span(U)` fitted to the neighbourhood of the sample
/// nearest to `x`.
struct LocalPlane {
    center: DVector<f64>,
    /// `U U^T`.
    projector: DMatrix<f64>,
}

impl LocalPlane {
    fn around(data: &Dataset, x: &DVector<f64>, exclude: Option<usize>) -> Self {
        let anchor = &data.samples[nearest(data, x, None, exclude)];
        let mut order: Vec<(f64, usize)> = data
            .samples
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != exclude)
            .map(|(i, s)| (sqdist(s, anchor, None), i))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let k = SNAP_NEIGHBOURS.min(order.len());
        let d = data.dim();
        let mut center = DVector::zeros(d);
        for &(_, i) in &order[..k] {
            center += &data.samples[i];
        }
        center /= k as f64;
        let centred = DMatrix::from_fn(k, d, |r, c| data.samples[order[r].1][c] - center[c]);
        let svd = centred.svd(false, true);
        let vt = svd.v_t.expect("requested");
        let m = data.manifold_dim.min(vt.nrows());
        let u = vt.rows(0, m).transpose();
        LocalPlane {
            center,
            projector: &u * u.transpose(),
        }
    }

    fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.center + &self.projector * (x - &self.center)
    }
}

/// Imputation of one masked vector with a given transport matrix. Returns
/// the output and, for the gradient, the representative value and
/// `d out_M / d u'`.
fn impute_with(
    conn: &LearnedConnection,
    data: &Dataset,
    x_obs: &DVector<f64>,
    p: &DMatrix<f64>,
    exclude: Option<usize>,
) -> (DVector<f64>, DVector<f64>, DMatrix<f64>) {
    let observed = conn.mask.observed();
    let missing = conn.mask.missing();
    let rep = &data.samples[nearest(data, x_obs, Some(&observed), exclude)];
    let u_bar = DVector::from_iterator(missing.len(), missing.iter().map(|&j| rep[j]));
    let u = p * &u_bar;
    let mut guess = x_obs.clone();
    for (k, &j) in missing.iter().enumerate() {
        guess[j] = u[k];
    }
    let plane = LocalPlane::around(data, &guess, exclude);
    let snapped = plane.project(&guess);
    let mut out = x_obs.clone();
    for &j in &missing {
        out[j] = snapped[j];
    }
    let k_mm = DMatrix::from_fn(missing.len(), missing.len(), |r, c| plane.projector[(missing[r], missing[c])]);
    (out, u_bar, k_mm)
}

/// Options for [`fit_connection`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitOptions {
    pub lambda: f64,
    pub iterations: usize,
    pub seed: u64,
    pub degree: u32,
    pub cells: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            lambda: 0.0,
            iterations: 50,
            seed: 0,
            degree: 2,
            cells: 4,
        }
    }
}

struct Objective<'a> {
    conn: &'a LearnedConnection,
    data: &'a Dataset,
    paths: Vec<Staircase>,
    lambda: f64,
    exec: Exec,
}

impl Objective<'_> {
    /// `(total, recon, curvature energy)` and optionally the gradient.
    fn eval(&self, coeffs: &[DMatrix<f64>], want_grad: bool) -> (f64, f64, f64, Option<Vec<DMatrix<f64>>>) {
        let q = self.conn.q();
        let missing = self.conn.mask.missing();
        let n = self.data.len();
        let shape = || vec![DMatrix::<f64>::zeros(q, q); coeffs.len()];
        let per_sample = self.exec.map(n, |i| {
            let x = &self.data.samples[i];
            let factors = self.conn.factors(coeffs, &self.paths[i]);
            let p = transport_of(&factors, q);
            let (out, u_bar, k_mm) = impute_with(self.conn, self.data, x, &p, Some(i));
            let r = DVector::from_iterator(q, missing.iter().map(|&j| x[j] - out[j]));
            let loss = r.norm_squared() / n as f64;
            let grad = want_grad.then(|| {
                let du = k_mm.transpose() * &r * (-2.0 / n as f64);
                let dp = &du * u_bar.transpose();
                let mut g = shape();
                self.conn.transport_backprop(coeffs, &self.paths[i], &dp, &mut g);
                g
            });
            (loss, grad)
        });
        let mut recon = 0.0;
        let mut grad = want_grad.then(shape);
        for (l, g) in per_sample {
            recon += l;
            if let (Some(acc), Some(g)) = (grad.as_mut(), g) {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
        let mut cgrad = want_grad.then(shape);
        let curv = self.conn.curvature_energy(coeffs, cgrad.as_deref_mut());
        if let (Some(acc), Some(cg)) = (grad.as_mut(), cgrad) {
            for (a, b) in acc.iter_mut().zip(cg) {
                *a += b * self.lambda;
            }
        }
        (recon + self.lambda * curv, recon, curv, grad)
    }
}

fn axpy(c: &[DMatrix<f64>], t: f64, g: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
    c.iter().zip(g).map(|(a, b)| a - b * t).collect()
}

pub fn fit_connection(data: &Dataset, mask: &Mask, opts: &FitOptions) -> Result<LearnedConnection> {
    fit_connection_with(Exec::default(), data, mask, opts)
}

/// Gradient descent with Armijo backtracking from the zero connection. Each
/// training sample is imputed leave-one-out along its own staircase, drawn
/// once from `opts.seed`.
pub fn fit_connection_with(exec: Exec, data: &Dataset, mask: &Mask, opts: &FitOptions) -> Result<LearnedConnection> {
    if !(opts.lambda >= 0.0) || !opts.lambda.is_finite() {
        return Err(Error::invalid("lambda must be finite and non-negative"));
    }
    if opts.iterations == 0 {
        return Err(Error::invalid("iterations must be at least 1"));
    }
    let mut conn = LearnedConnection::zero(data, mask, opts.degree, opts.cells)?;
    conn.lambda = opts.lambda;
    let q = conn.q();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let paths = (0..data.len()).map(|_| Staircase::random(q, opts.cells, &mut rng)).collect();
    let obj = Objective {
        conn: &conn,
        data,
        paths,
        lambda: opts.lambda,
        exec,
    };
    let mut coeffs = conn.coeffs.clone();
    let (mut loss, mut recon, mut curv, mut grad) = obj.eval(&coeffs, true);
    let initial = loss;
    if !initial.is_finite() {
        return Err(Error::FitDiverged {
            iteration: 0,
            loss,
            initial,
        });
    }
    let baseline = recon;
    let mut trace = vec![loss];
    let mut step = 1.0;
    let mut iterations = 0;
    for it in 1..=opts.iterations {
        let g = grad.take().expect("gradient requested");
        let g2: f64 = g.iter().map(|m| m.norm_squared()).sum();
        if g2 <= 1e-30 {
            break;
        }
        let mut accepted = None;
        let mut t = step * 2.0;
        for _ in 0..60 {
            let trial = axpy(&coeffs, t, &g);
            let (l, r, c, _) = obj.eval(&trial, false);
            if l.is_finite() && l <= loss - 1e-4 * t * g2 {
                accepted = Some((trial, l, r, c));
                break;
            }
            t *= 0.5;
        }
        let Some((trial, l, r, c)) = accepted else { break };
        if l > 1e6 * initial {
            return Err(Error::FitDiverged {
                iteration: it,
                loss: l,
                initial,
            });
        }
        step = t;
        coeffs = trial;
        (loss, recon, curv) = (l, r, c);
        trace.push(loss);
        iterations = it;
        if it < opts.iterations {
            grad = obj.eval(&coeffs, true).3;
        }
    }
    conn.coeffs = coeffs;
    conn.fit_report = FitReport {
        loss_trace: trace,
        baseline_loss: baseline,
        recon_loss: recon,
        curvature_norm: curv.sqrt(),
        iterations,
    };
    Ok(conn)
}

pub fn impute(conn: &LearnedConnection, data: &Dataset, x_obs: &DVector<f64>, paths: usize, seed: u64) -> Result<Vec<DVector<f64>>> {
    impute_with_exec(Exec::default(), conn, data, x_obs, paths, seed)
}

/// One imputation per random staircase. Observed coordinates of every
/// output are copied from `x_obs`; its missing entries are ignored.
pub fn impute_with_exec(
    exec: Exec,
    conn: &LearnedConnection,
    data: &Dataset,
    x_obs: &DVector<f64>,
    paths: usize,
    seed: u64,
) -> Result<Vec<DVector<f64>>> {
    if data.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    if paths == 0 {
        return Err(Error::invalid("need at least one path"));
    }
    if x_obs.len() != conn.mask.dim() || data.dim() != conn.mask.dim() {
        return Err(Error::invalid("x_obs, data and mask dimensions differ"));
    }
    if conn.mask.observed().iter().any(|&j| !x_obs[j].is_finite()) {
        return Err(Error::invalid("observed coordinates must be finite"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let staircases: Vec<Staircase> = (0..paths).map(|_| Staircase::random(conn.q(), conn.cells, &mut rng)).collect();
    // NaN in the missing slots must not leak into the neighbour search
    let mut x = x_obs.clone();
    for j in conn.mask.missing() {
        x[j] = 0.0;
    }
    Ok(exec.map(paths, |i| {
        let p = conn.transport(&staircases[i]);
        let (mut out, _, _) = impute_with(conn, data, &x, &p, None);
        for j in conn.mask.observed() {
            out[j] = x_obs[j];
        }
        out
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diversity {
    pub mean: DVector<f64>,
    /// Root mean squared pairwise distance over the missing coordinates.
    pub spread: f64,
}

pub fn diversity_report(outputs: &[DVector<f64>], mask: &Mask) -> Result<Diversity> {
    let Some(first) = outputs.first() else {
        return Err(Error::invalid("diversity needs at least one output"));
    };
    let mut mean = DVector::zeros(first.len());
    for o in outputs {
        mean += o;
    }
    mean /= outputs.len() as f64;
    let missing = mask.missing();
    let n = outputs.len();
    if n == 1 {
        return Ok(Diversity { mean, spread: 0.0 });
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            sum += sqdist(&outputs[i], &outputs[j], Some(&missing));
        }
    }
    Ok(Diversity {
        mean,
        spread: (sum / (n * (n - 1) / 2) as f64).sqrt(),
    })
}

/// A connection with `F_01 = J` constant, `J` the rotation generator in the
/// first two fibre coordinates: `omega_0 = 0`, `omega_1 = strength x_0 J`.
pub fn planted_curved_connection(data: &Dataset, mask: &Mask, strength: f64, cells: usize) -> Result<LearnedConnection> {
    let mut conn = LearnedConnection::zero(data, mask, 2, cells)?;
    let q = conn.q();
    if q < 2 {
        return Err(Error::invalid("curvature needs at least two missing coordinates"));
    }
    let mut j = DMatrix::zeros(q, q);
    j[(0, 1)] = -strength;
    j[(1, 0)] = strength;
    let mut e = vec![0; q];
    e[0] = 1;
    conn.set_term(1, &e, j)?;
    Ok(conn)
}

/// A flat connection with commuting constant diagonal coefficients.
pub fn planted_flat_connection(data: &Dataset, mask: &Mask, scale: f64, cells: usize) -> Result<LearnedConnection> {
    let mut conn = LearnedConnection::zero(data, mask, 2, cells)?;
    let q = conn.q();
    for a in 0..q {
        let d = DMatrix::from_diagonal(&DVector::from_fn(q, |i, _| scale * (1.0 + i as f64 + 0.5 * a as f64)));
        conn.set_term(a, &vec![0; q], d)?;
    }
    Ok(conn)
}
