//! Transported product on matrix-valued sections over a two-leaf chart.
//!
//! A section value `a` (a `k x k` matrix) is moved along a grid path by the
//! tensor transport of the two connections, `a -> P1 a P2^T`, where `P1` and
//! `P2` are the transports of the two fields along the same path. When the
//! second field is the dual `-w1^T` of the first, `P2^T = P1^{-1}` and the
//! transport is conjugation, hence multiplicative.

mod loops;

pub use loops::{moufang_table_residual, octonion_basis_product, LoopTable, FANO_TRIPLES};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::connection::{torsion, transport_path, AffineField, ConnectionField, GridPath};
use crate::error::{Error, Result};
use crate::exec::Exec;

#[derive(Debug, Clone, PartialEq)]
pub struct SectionSample {
    pub base_point: Vec<f64>,
    pub value: DMatrix<f64>,
}

impl SectionSample {
    pub fn new(base_point: Vec<f64>, value: DMatrix<f64>) -> Result<Self> {
        if !value.iter().chain(base_point.iter()).all(|v| v.is_finite()) {
            return Err(Error::invalid("section sample has non-finite entries"));
        }
        if value.nrows() != value.ncols() {
            return Err(Error::invalid("section value must be square"));
        }
        Ok(SectionSample { base_point, value })
    }
}

/// Order of the two legs of the staircase path between two points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathConvention {
    #[default]
    Axis1ThenAxis2,
    Axis2ThenAxis1,
}

impl PathConvention {
    pub fn flipped(self) -> Self {
        match self {
            PathConvention::Axis1ThenAxis2 => PathConvention::Axis2ThenAxis1,
            PathConvention::Axis2ThenAxis1 => PathConvention::Axis1ThenAxis2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StarContext {
    field1: ConnectionField,
    field2: ConnectionField,
    pub base_point: Vec<f64>,
    pub convention: PathConvention,
    pub steps_per_unit: usize,
}

impl StarContext {
    pub fn new(field1: ConnectionField, field2: ConnectionField, base_point: Vec<f64>, steps_per_unit: usize) -> Result<Self> {
        if field1.chart() != field2.chart() {
            return Err(Error::invalid("the two fields must share a chart"));
        }
        if field1.dim() != 2 {
            return Err(Error::invalid("the product needs a 2-axis chart"));
        }
        if field1.fiber_dim() != field2.fiber_dim() {
            return Err(Error::invalid("the two fields must share a fiber dimension"));
        }
        if steps_per_unit == 0 {
            return Err(Error::invalid("steps_per_unit must be at least 1"));
        }
        field1.chart().require(&base_point)?;
        Ok(StarContext {
            field1,
            field2,
            base_point,
            convention: PathConvention::default(),
            steps_per_unit,
        })
    }

    pub fn with_convention(mut self, convention: PathConvention) -> Self {
        self.convention = convention;
        self
    }

    pub fn field1(&self) -> &ConnectionField {
        &self.field1
    }

    pub fn field2(&self) -> &ConnectionField {
        &self.field2
    }

    pub fn fiber_dim(&self) -> usize {
        self.field1.fiber_dim()
    }

    fn staircase(&self, from: &[f64], to: &[f64], convention: PathConvention) -> GridPath {
        let d0 = (0, to[0] - from[0]);
        let d1 = (1, to[1] - from[1]);
        let segments = match convention {
            PathConvention::Axis1ThenAxis2 => vec![d0, d1],
            PathConvention::Axis2ThenAxis1 => vec![d1, d0],
        };
        GridPath::new(from.to_vec(), segments)
    }

    /// Tensor transport of a fiber value from `from` to `to`.
    pub fn transport(&self, value: &DMatrix<f64>, from: &[f64], to: &[f64], convention: PathConvention) -> Result<DMatrix<f64>> {
        let (p1, p2) = self.transports(from, to, convention)?;
        Ok(&p1 * value * p2.transpose())
    }

    fn transports(&self, from: &[f64], to: &[f64], convention: PathConvention) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        self.field1.chart().require(to)?;
        let path = self.staircase(from, to, convention);
        let p1 = transport_path(&self.field1, &path, self.steps_per_unit)?;
        let p2 = transport_path(&self.field2, &path, self.steps_per_unit)?;
        Ok((p1, p2))
    }

    fn check_fiber(&self, s: &SectionSample) -> Result<()> {
        let k = self.fiber_dim();
        if s.value.nrows() != k || s.value.ncols() != k {
            return Err(Error::invalid(format!(
                "section value is {}x{}, fiber dimension is {k}",
                s.value.nrows(),
                s.value.ncols()
            )));
        }
        Ok(())
    }
}

fn star_via(ctx: &StarContext, a: &SectionSample, b: &SectionSample, target: &[f64], conv: PathConvention) -> Result<SectionSample> {
    ctx.check_fiber(a)?;
    ctx.check_fiber(b)?;
    let pa = ctx.transport(&a.value, &a.base_point, target, conv)?;
    let pb = ctx.transport(&b.value, &b.base_point, target, conv)?;
    Ok(SectionSample {
        base_point: target.to_vec(),
        value: pa * pb,
    })
}

/// `a * b` at `target`: both factors are transported along the context's
/// staircase path, then multiplied.
pub fn star(ctx: &StarContext, a: &SectionSample, b: &SectionSample, target: &[f64]) -> Result<SectionSample> {
    star_via(ctx, a, b, target, ctx.convention)
}

/// Frobenius distance between the products computed with the two leg orders.
pub fn path_discrepancy(ctx: &StarContext, a: &SectionSample, b: &SectionSample, target: &[f64]) -> Result<f64> {
    let x = star_via(ctx, a, b, target, ctx.convention)?;
    let y = star_via(ctx, a, b, target, ctx.convention.flipped())?;
    Ok((x.value - y.value).norm())
}

/// Corner of the staircase from the context base point to `target`, where
/// inner products of triple expressions are formed.
pub fn intermediate_point(ctx: &StarContext, target: &[f64]) -> Vec<f64> {
    match ctx.convention {
        PathConvention::Axis1ThenAxis2 => vec![target[0], ctx.base_point[1]],
        PathConvention::Axis2ThenAxis1 => vec![ctx.base_point[0], target[1]],
    }
}

#[derive(Debug, Clone)]
pub struct Associator {
    pub value: DMatrix<f64>,
    pub norm: f64,
}

/// `(a*b)*c - a*(b*c)` at `target`, inner products formed at
/// [`intermediate_point`].
pub fn associator(ctx: &StarContext, a: &SectionSample, b: &SectionSample, c: &SectionSample, target: &[f64]) -> Result<Associator> {
    let q = intermediate_point(ctx, target);
    let left = star(ctx, &star(ctx, a, b, &q)?, c, target)?;
    let right = star(ctx, a, &star(ctx, b, c, &q)?, target)?;
    let value = left.value - right.value;
    let norm = value.norm();
    Ok(Associator { value, norm })
}

/// `|| (a*b)*(c*a) - (a*(b*c))*a ||_F`, inner products at
/// [`intermediate_point`].
pub fn moufang_geometric(ctx: &StarContext, a: &SectionSample, b: &SectionSample, c: &SectionSample, target: &[f64]) -> Result<f64> {
    let q = intermediate_point(ctx, target);
    let left = star(ctx, &star(ctx, a, b, &q)?, &star(ctx, c, a, &q)?, target)?;
    let inner = star(ctx, a, &star(ctx, b, c, &q)?, &q)?;
    let right = star(ctx, &inner, a, target)?;
    Ok((left.value - right.value).norm())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    /// Solve `a * x = b`.
    Left,
    /// Solve `y * a = b`.
    Right,
}

#[derive(Debug, Clone)]
pub struct Division {
    /// The quotient, based at `b`'s base point.
    pub quotient: SectionSample,
    /// `|| a*x - P(b) ||_F` (or `y*a`) at the target.
    pub residual: f64,
}

/// Quotient of `b` by `a` at `target`. Fails with [`Error::NoDivision`] when
/// the transported `a` is numerically singular.
pub fn divide(ctx: &StarContext, a: &SectionSample, b: &SectionSample, side: Side, target: &[f64]) -> Result<Division> {
    ctx.check_fiber(a)?;
    ctx.check_fiber(b)?;
    let conv = ctx.convention;
    let pa = ctx.transport(&a.value, &a.base_point, target, conv)?;
    let (p1, p2) = ctx.transports(&b.base_point, target, conv)?;
    let pb = &p1 * &b.value * p2.transpose();

    let sv = pa.clone().svd(true, true);
    let smax = sv.singular_values.max();
    let smin = sv.singular_values.min();
    if !(smin > 1e-12 * smax.max(1.0)) {
        return Err(Error::NoDivision { sigma_min: smin });
    }
    let pa_inv = sv.pseudo_inverse(0.0).expect("u and v were computed");
    let px = match side {
        Side::Left => &pa_inv * &pb,
        Side::Right => &pb * &pa_inv,
    };
    // pull back through the transport from b's base point
    let p1_inv = p1.clone().try_inverse().ok_or(Error::NoDivision { sigma_min: 0.0 })?;
    let p2t_inv = p2.transpose().try_inverse().ok_or(Error::NoDivision { sigma_min: 0.0 })?;
    let quotient = SectionSample {
        base_point: b.base_point.clone(),
        value: p1_inv * px * p2t_inv,
    };
    let check = match side {
        Side::Left => star(ctx, a, &quotient, target)?,
        Side::Right => star(ctx, &quotient, a, target)?,
    };
    let residual = (check.value - pb).norm();
    Ok(Division { quotient, residual })
}

#[derive(Debug, Clone, Serialize)]
pub struct CriterionVerdict {
    pub torsion_norm1: f64,
    pub torsion_norm2: f64,
    /// Largest `|| F1 + F2^T ||_F` over interior nodes.
    pub curvature_duality_defect: f64,
    pub associative: bool,
    pub tolerance: f64,
}

/// Largest absolute torsion component over the whole chart.
pub fn torsion_norm(affine: &AffineField) -> f64 {
    torsion(affine)
        .iter()
        .flat_map(|t| t.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()))
}

pub fn curvature_duality_defect(ctx: &StarContext) -> Result<f64> {
    let f1 = ctx.field1.curvature(0, 1)?;
    let f2 = ctx.field2.curvature(0, 1)?;
    Ok(f1.max_diff_interior(&f2, |m| -m.transpose()))
}

/// Associativity verdict: both torsions and the curvature-duality defect
/// must be within `tol`.
pub fn criterion_verdict(ctx: &StarContext, affine1: &AffineField, affine2: &AffineField, tol: f64) -> Result<CriterionVerdict> {
    if affine1.chart() != affine2.chart() {
        return Err(Error::invalid("affine fields must share a chart"));
    }
    let torsion_norm1 = torsion_norm(affine1);
    let torsion_norm2 = torsion_norm(affine2);
    let defect = curvature_duality_defect(ctx)?;
    Ok(CriterionVerdict {
        torsion_norm1,
        torsion_norm2,
        curvature_duality_defect: defect,
        associative: torsion_norm1 <= tol && torsion_norm2 <= tol && defect <= tol,
        tolerance: tol,
    })
}

/// Random triple based at the context base point with a random target.
#[derive(Debug, Clone)]
pub struct Triple {
    pub a: SectionSample,
    pub b: SectionSample,
    pub c: SectionSample,
    pub target: Vec<f64>,
}

pub fn random_triples(ctx: &StarContext, n: usize, seed: u64) -> Vec<Triple> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = ctx.fiber_dim();
    let chart = ctx.field1.chart();
    let sample = |rng: &mut ChaCha8Rng| SectionSample {
        base_point: ctx.base_point.clone(),
        value: DMatrix::from_fn(k, k, |_, _| rng.random_range(-1.0..1.0)),
    };
    (0..n)
        .map(|_| {
            let a = sample(&mut rng);
            let b = sample(&mut rng);
            let c = sample(&mut rng);
            let target = (0..2).map(|j| rng.random_range(chart.mins()[j]..=chart.maxs()[j])).collect();
            Triple { a, b, c, target }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub associator_norms: Vec<f64>,
    pub moufang_residuals: Vec<f64>,
    pub path_discrepancies: Vec<f64>,
    pub median_associator: f64,
    pub max_associator: f64,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Associator, Moufang and two-path statistics over random triples.
pub fn associator_sweep(ctx: &StarContext, n: usize, seed: u64) -> Result<SweepReport> {
    associator_sweep_with(Exec::default(), ctx, n, seed)
}

pub fn associator_sweep_with(exec: Exec, ctx: &StarContext, n: usize, seed: u64) -> Result<SweepReport> {
    let triples = random_triples(ctx, n, seed);
    let rows = exec.try_map(triples.len(), |i| {
        let t = &triples[i];
        let assoc = associator(ctx, &t.a, &t.b, &t.c, &t.target)?.norm;
        let mouf = moufang_geometric(ctx, &t.a, &t.b, &t.c, &t.target)?;
        let disc = path_discrepancy(ctx, &t.a, &t.b, &t.target)?;
        Ok::<_, Error>((assoc, mouf, disc))
    })?;
    let associator_norms: Vec<f64> = rows.iter().map(|r| r.0).collect();
    Ok(SweepReport {
        median_associator: median(&associator_norms),
        max_associator: associator_norms.iter().copied().fold(0.0, f64::max),
        moufang_residuals: rows.iter().map(|r| r.1).collect(),
        path_discrepancies: rows.iter().map(|r| r.2).collect(),
        associator_norms,
    })
}
