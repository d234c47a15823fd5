//! Measurement model: point objects, affine projections to image planes,
//! slab-binned Radon samples, moment maps and two-projection point recovery.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix2x3, Rotation3, Unit, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{null_space, pinv, RankReport};

/// Finite weighted point set in real 3-space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawObject", into = "RawObject")]
pub struct PointObject {
    label: String,
    points: Vec<Vector3<f64>>,
    weights: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawObject {
    label: String,
    points: Vec<[f64; 3]>,
    weights: Vec<f64>,
}

impl TryFrom<RawObject> for PointObject {
    type Error = Error;

    fn try_from(raw: RawObject) -> Result<Self> {
        let points = raw.points.iter().map(|p| Vector3::from(*p)).collect();
        PointObject::new(raw.label, points, raw.weights)
    }
}

impl From<PointObject> for RawObject {
    fn from(obj: PointObject) -> Self {
        RawObject {
            label: obj.label,
            points: obj.points.iter().map(|p| [p.x, p.y, p.z]).collect(),
            weights: obj.weights,
        }
    }
}

impl PointObject {
    pub fn new(label: impl Into<String>, points: Vec<Vector3<f64>>, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("point object has no points"));
        }
        if weights.len() != points.len() {
            return Err(Error::invalid(format!(
                "{} weights for {} points",
                weights.len(),
                points.len()
            )));
        }
        if points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::invalid("non-finite coordinate"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("weights must be finite and non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::DegenerateInput("total weight is zero".into()));
        }
        Ok(PointObject {
            label: label.into(),
            points,
            weights,
        })
    }

    /// Unit weights for every point.
    pub fn uniform(label: impl Into<String>, points: Vec<Vector3<f64>>) -> Result<Self> {
        let n = points.len();
        Self::new(label, points, vec![1.0; n])
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Weighted centroid in 3-space.
    pub fn centroid(&self) -> Vector3<f64> {
        let total = self.total_weight();
        self.points
            .iter()
            .zip(&self.weights)
            .fold(Vector3::zeros(), |acc, (p, w)| acc + p * *w)
            / total
    }

    /// Applies `f` to every point, keeping weights and label.
    pub fn map_points(&self, f: impl Fn(&Vector3<f64>) -> Vector3<f64>) -> Self {
        PointObject {
            label: self.label.clone(),
            points: self.points.iter().map(f).collect(),
            weights: self.weights.clone(),
        }
    }

    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self> {
        Self::new(self.label.clone(), self.points.clone(), weights)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    RandomCloud,
    Helix,
    SymmetricCapsid,
}

pub const HELIX_RADIUS: f64 = 1.0;
pub const HELIX_PITCH: f64 = 0.15;
/// Order of the cyclic symmetry (about the z-axis) of generated capsids.
pub const CAPSID_ORDER: usize = 5;

/// Parameter samples used by the helix generator: sorted draws on `[0, 4π)`.
pub fn helix_parameters(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..4.0 * PI)).collect();
    s.sort_by(f64::total_cmp);
    s
}

/// Deterministic synthetic objects.
///
/// `symmetric_capsid` is built by orbit closure under the cyclic group of
/// order [`CAPSID_ORDER`] about the z-axis, so it carries
/// `CAPSID_ORDER * ceil(n / CAPSID_ORDER)` points.
pub fn generate_object(kind: ObjectKind, n: usize, seed: u64) -> Result<PointObject> {
    if n == 0 {
        return Err(Error::invalid("object needs at least one point"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        ObjectKind::RandomCloud => {
            let points = (0..n)
                .map(|_| {
                    Vector3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    )
                })
                .collect();
            PointObject::uniform("random_cloud", points)
        }
        ObjectKind::Helix => {
            let points = helix_parameters(n, seed)
                .into_iter()
                .map(|s| Vector3::new(HELIX_RADIUS * s.cos(), HELIX_RADIUS * s.sin(), HELIX_PITCH * s))
                .collect();
            PointObject::uniform("helix", points)
        }
        ObjectKind::SymmetricCapsid => {
            let orbits = n.div_ceil(CAPSID_ORDER);
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            let mut points = Vec::with_capacity(orbits * CAPSID_ORDER);
            let mut weights = Vec::with_capacity(orbits * CAPSID_ORDER);
            for _ in 0..orbits {
                let dir = Vector3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng));
                let radius = rng.random_range(0.8..1.2);
                let seed_point = dir.normalize() * radius;
                let w = rng.random_range(0.5..1.5);
                for j in 0..CAPSID_ORDER {
                    let angle = 2.0 * PI * j as f64 / CAPSID_ORDER as f64;
                    let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), angle);
                    points.push(rot * seed_point);
                    weights.push(w);
                }
            }
            PointObject::new("symmetric_capsid", points, weights)
        }
    }
}

/// Affine projection `x -> matrix * x + offset` onto an image plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawProjection", into = "RawProjection")]
pub struct ProjectionSpec {
    matrix: Matrix2x3<f64>,
    offset: Vector2<f64>,
    center_tag: String,
}

#[derive(Serialize, Deserialize)]
struct RawProjection {
    matrix: [[f64; 3]; 2],
    offset: [f64; 2],
    #[serde(default, skip_serializing_if = "String::is_empty")]
    center_tag: String,
}

impl TryFrom<RawProjection> for ProjectionSpec {
    type Error = Error;

    fn try_from(raw: RawProjection) -> Result<Self> {
        let m = Matrix2x3::from_row_slice(&[
            raw.matrix[0][0],
            raw.matrix[0][1],
            raw.matrix[0][2],
            raw.matrix[1][0],
            raw.matrix[1][1],
            raw.matrix[1][2],
        ]);
        Ok(ProjectionSpec::new(m, Vector2::from(raw.offset))?.with_tag(raw.center_tag))
    }
}

impl From<ProjectionSpec> for RawProjection {
    fn from(p: ProjectionSpec) -> Self {
        let m = p.matrix;
        RawProjection {
            matrix: [[m[(0, 0)], m[(0, 1)], m[(0, 2)]], [m[(1, 0)], m[(1, 1)], m[(1, 2)]]],
            offset: [p.offset.x, p.offset.y],
            center_tag: p.center_tag,
        }
    }
}

impl ProjectionSpec {
    /// Rejects non-finite entries and matrices of rank below 2.
    pub fn new(matrix: Matrix2x3<f64>, offset: Vector2<f64>) -> Result<Self> {
        if !matrix.iter().chain(offset.iter()).all(|v| v.is_finite()) {
            return Err(Error::invalid("projection has non-finite entries"));
        }
        let report = RankReport::of(&to_dmatrix(&matrix));
        if report.rank < 2 {
            return Err(Error::invalid(format!(
                "projection matrix has rank {} (needs 2)",
                report.rank
            )));
        }
        Ok(ProjectionSpec {
            matrix,
            offset,
            center_tag: String::new(),
        })
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.center_tag = tag.into();
        self
    }

    /// Drops z.
    pub fn identity_xy() -> Self {
        Self::new(Matrix2x3::new(1., 0., 0., 0., 1., 0.), Vector2::zeros())
            .expect("orthonormal rows")
            .with_tag("xy")
    }

    /// Drops x.
    pub fn yz() -> Self {
        Self::new(Matrix2x3::new(0., 1., 0., 0., 0., 1.), Vector2::zeros())
            .expect("orthonormal rows")
            .with_tag("yz")
    }

    /// Tilt-series view: rotate by `theta` about the y-axis, then drop z.
    pub fn from_tilt(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Self::new(Matrix2x3::new(c, 0., s, 0., 1., 0.), Vector2::zeros())
            .expect("orthonormal rows")
            .with_tag(format!("tilt:{theta}"))
    }

    pub fn matrix(&self) -> &Matrix2x3<f64> {
        &self.matrix
    }

    pub fn offset(&self) -> &Vector2<f64> {
        &self.offset
    }

    pub fn center_tag(&self) -> &str {
        &self.center_tag
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector2<f64> {
        self.matrix * p + self.offset
    }
}

/// Invertible affine map between the two image planes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDuality", into = "RawDuality")]
pub struct DualityMap {
    matrix: Matrix2<f64>,
    offset: Vector2<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawDuality {
    matrix: [[f64; 2]; 2],
    #[serde(default)]
    offset: [f64; 2],
}

impl TryFrom<RawDuality> for DualityMap {
    type Error = Error;

    fn try_from(raw: RawDuality) -> Result<Self> {
        let m = Matrix2::new(raw.matrix[0][0], raw.matrix[0][1], raw.matrix[1][0], raw.matrix[1][1]);
        DualityMap::new(m, Vector2::from(raw.offset))
    }
}

impl From<DualityMap> for RawDuality {
    fn from(d: DualityMap) -> Self {
        let m = d.matrix;
        RawDuality {
            matrix: [[m[(0, 0)], m[(0, 1)]], [m[(1, 0)], m[(1, 1)]]],
            offset: [d.offset.x, d.offset.y],
        }
    }
}

impl Default for DualityMap {
    fn default() -> Self {
        DualityMap {
            matrix: Matrix2::identity(),
            offset: Vector2::zeros(),
        }
    }
}

impl DualityMap {
    pub fn new(matrix: Matrix2<f64>, offset: Vector2<f64>) -> Result<Self> {
        if !matrix.iter().chain(offset.iter()).all(|v| v.is_finite()) {
            return Err(Error::invalid("duality map has non-finite entries"));
        }
        let det = matrix.determinant();
        if det.abs() <= 1e-12 * matrix.norm().powi(2).max(f64::MIN_POSITIVE) {
            return Err(Error::invalid("duality map is not invertible"));
        }
        Ok(DualityMap { matrix, offset })
    }

    pub fn matrix(&self) -> &Matrix2<f64> {
        &self.matrix
    }

    pub fn offset(&self) -> &Vector2<f64> {
        &self.offset
    }

    pub fn apply(&self, z: &Vector2<f64>) -> Vector2<f64> {
        self.matrix * z + self.offset
    }
}

/// Two projections and the duality map relating their image planes.
///
/// Construction only checks each part; joint independence (stacked rank 3)
/// is reported by [`ProjectionPair::independence`] and enforced by the
/// solvers that need it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionPair {
    pub p1: ProjectionSpec,
    pub p2: ProjectionSpec,
    #[serde(default)]
    pub duality: DualityMap,
}

impl ProjectionPair {
    pub fn new(p1: ProjectionSpec, p2: ProjectionSpec, duality: DualityMap) -> Self {
        ProjectionPair { p1, p2, duality }
    }

    /// The 4x3 matrix `[M1; M2]`.
    pub fn stacked(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(4, 3);
        a.view_mut((0, 0), (2, 3)).copy_from(&self.p1.matrix);
        a.view_mut((2, 0), (2, 3)).copy_from(&self.p2.matrix);
        a
    }

    pub fn independence(&self) -> RankReport {
        RankReport::of(&self.stacked())
    }

    pub fn require_independent(&self) -> Result<RankReport> {
        let report = self.independence();
        if report.rank < 3 {
            return Err(ill_posed(&self.stacked(), &report, 3));
        }
        Ok(report)
    }
}

pub(crate) fn ill_posed(m: &DMatrix<f64>, report: &RankReport, required: usize) -> Error {
    Error::IllPosed {
        rank: report.rank,
        required,
        sigma_min: report.sigma_min,
        null_space: null_space(m).into_iter().map(|v| v.iter().copied().collect()).collect(),
    }
}

pub(crate) fn to_dmatrix(m: &Matrix2x3<f64>) -> DMatrix<f64> {
    DMatrix::from_iterator(2, 3, m.iter().copied())
}

pub fn project(obj: &PointObject, spec: &ProjectionSpec) -> Vec<Vector2<f64>> {
    obj.points().iter().map(|p| spec.apply(p)).collect()
}

/// Weighted centroid of the projected points.
pub fn moment_map(obj: &PointObject, spec: &ProjectionSpec) -> Result<Vector2<f64>> {
    let total = obj.total_weight();
    if total <= 0.0 {
        return Err(Error::DegenerateInput("total weight is zero".into()));
    }
    let sum = obj
        .points()
        .iter()
        .zip(obj.weights())
        .fold(Vector2::zeros(), |acc, (p, w)| acc + spec.apply(p) * *w);
    Ok(sum / total)
}

/// One plane-integral sample of the density.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadonSample {
    pub angle: f64,
    pub offset: f64,
    pub value: f64,
}

/// Unit normal of the Radon plane family: tilt of the z-axis towards x.
pub fn radon_normal(angle: f64) -> Vector3<f64> {
    let (s, c) = angle.sin_cos();
    Vector3::new(s, 0.0, c)
}

/// `true` when the signed distance `d` falls in the half-open slab
/// `[-w/2, w/2)`; adjacent slabs therefore partition the line.
fn in_slab(d: f64, slab_width: f64) -> bool {
    d >= -0.5 * slab_width && d < 0.5 * slab_width
}

/// Slab-binned Radon samples, angle-major: every offset for `angles[0]`,
/// then every offset for `angles[1]`, and so on.
pub fn radon_transform(
    obj: &PointObject,
    angles: &[f64],
    offsets: &[f64],
    slab_width: f64,
) -> Result<Vec<RadonSample>> {
    if angles.is_empty() || offsets.is_empty() {
        return Err(Error::invalid("radon transform needs angles and offsets"));
    }
    if !(slab_width > 0.0) {
        return Err(Error::invalid("slab width must be positive"));
    }
    let mut out = Vec::with_capacity(angles.len() * offsets.len());
    for &angle in angles {
        let n = radon_normal(angle);
        for &offset in offsets {
            let value = obj
                .points()
                .iter()
                .zip(obj.weights())
                .filter(|(p, _)| in_slab(n.dot(p) - offset, slab_width))
                .map(|(_, w)| *w)
                .sum();
            out.push(RadonSample { angle, offset, value });
        }
    }
    Ok(out)
}

/// Incidence matrix of the binned Radon transform for known particle
/// positions: entry `(s, k)` is 1 when particle `k` lies in slab `s`.
/// Rows follow the same angle-major order as [`radon_transform`].
pub fn radon_system(
    positions: &[Vector3<f64>],
    angles: &[f64],
    offsets: &[f64],
    slab_width: f64,
) -> Result<DMatrix<f64>> {
    if angles.is_empty() || offsets.is_empty() || positions.is_empty() {
        return Err(Error::invalid("radon system needs angles, offsets and particles"));
    }
    if !(slab_width > 0.0) {
        return Err(Error::invalid("slab width must be positive"));
    }
    let rows = angles.len() * offsets.len();
    let mut m = DMatrix::zeros(rows, positions.len());
    for (a, &angle) in angles.iter().enumerate() {
        let n = radon_normal(angle);
        for (o, &offset) in offsets.iter().enumerate() {
            for (k, p) in positions.iter().enumerate() {
                if in_slab(n.dot(p) - offset, slab_width) {
                    m[(a * offsets.len() + o, k)] = 1.0;
                }
            }
        }
    }
    Ok(m)
}

/// Recovers particle masses from binned samples by least squares. Fails with
/// [`Error::IllPosed`] when the samples do not separate the particles.
pub fn solve_radon_weights(system: &DMatrix<f64>, samples: &[RadonSample]) -> Result<Vec<f64>> {
    if samples.len() != system.nrows() {
        return Err(Error::invalid(format!(
            "{} samples for a system with {} rows",
            samples.len(),
            system.nrows()
        )));
    }
    let report = RankReport::of(system);
    if report.rank < system.ncols() {
        return Err(ill_posed(system, &report, system.ncols()));
    }
    let b = DVector::from_iterator(samples.len(), samples.iter().map(|s| s.value));
    Ok((pinv(system) * b).iter().copied().collect())
}

/// How points of the two images are put in correspondence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matching {
    /// Index `k` of one image matches index `k` of the other.
    #[default]
    Given,
    /// Sort both images by signed distance to their centroid along the
    /// image-1 x-axis and its duality image, then match by rank.
    CentroidSort,
}

#[derive(Debug, Clone)]
pub struct TwoProjectionSolution {
    pub object: PointObject,
    /// `|A p - b|` per recovered point.
    pub residuals: Vec<f64>,
    pub rank: RankReport,
    /// `pairs[k] = (i, j)`: recovered point `k` came from `y1[i]` and `y2[j]`.
    pub pairs: Vec<(usize, usize)>,
}

/// Least-squares recovery of 3-D points from two image point lists.
pub fn solve_two_projection_points(
    y1: &[Vector2<f64>],
    y2: &[Vector2<f64>],
    pair: &ProjectionPair,
    matching: Matching,
) -> Result<TwoProjectionSolution> {
    if y1.len() != y2.len() {
        return Err(Error::invalid(format!(
            "image lengths differ: {} vs {}",
            y1.len(),
            y2.len()
        )));
    }
    if y1.is_empty() {
        return Err(Error::invalid("no image points"));
    }
    let rank = pair.require_independent()?;
    let a = pair.stacked();
    let a_pinv = pinv(&a);

    let pairs: Vec<(usize, usize)> = match matching {
        Matching::Given => (0..y1.len()).map(|k| (k, k)).collect(),
        Matching::CentroidSort => {
            let axis1 = Vector2::new(1.0, 0.0);
            let axis2 = (pair.duality.matrix() * axis1).normalize();
            let order1 = sort_along(y1, &axis1);
            let order2 = sort_along(y2, &axis2);
            order1.into_iter().zip(order2).collect()
        }
    };

    let o1 = pair.p1.offset();
    let o2 = pair.p2.offset();
    let mut points = Vec::with_capacity(pairs.len());
    let mut residuals = Vec::with_capacity(pairs.len());
    for &(i, j) in &pairs {
        let b1 = y1[i] - o1;
        let b2 = y2[j] - o2;
        let b = DVector::from_column_slice(&[b1.x, b1.y, b2.x, b2.y]);
        let p = &a_pinv * &b;
        residuals.push((&a * &p - &b).norm());
        points.push(Vector3::new(p[0], p[1], p[2]));
    }
    let object = PointObject::uniform("two_projection_recovery", points)?;
    Ok(TwoProjectionSolution {
        object,
        residuals,
        rank,
        pairs,
    })
}

fn sort_along(ys: &[Vector2<f64>], axis: &Vector2<f64>) -> Vec<usize> {
    let c = ys.iter().fold(Vector2::zeros(), |a, y| a + y) / ys.len() as f64;
    let mut idx: Vec<usize> = (0..ys.len()).collect();
    idx.sort_by(|&a, &b| (ys[a] - c).dot(axis).total_cmp(&(ys[b] - c).dot(axis)));
    idx
}

/// Per-image-point noise model for synthetic projections.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PixelNoise {
    None,
    /// Isotropic Gaussian with per-coordinate standard deviation `sigma`,
    /// conditioned on the displacement norm being at most `sigma`.
    BoundedGaussian { sigma: f64 },
    /// Isotropic Gaussian with per-coordinate standard deviation `sigma`.
    Gaussian { sigma: f64 },
}

impl PixelNoise {
    pub fn perturb<R: Rng + ?Sized>(&self, y: &[Vector2<f64>], rng: &mut R) -> Vec<Vector2<f64>> {
        match *self {
            PixelNoise::None => y.to_vec(),
            PixelNoise::Gaussian { sigma } => {
                let n = Normal::new(0.0, sigma).expect("finite sigma");
                y.iter().map(|p| p + Vector2::new(n.sample(rng), n.sample(rng))).collect()
            }
            PixelNoise::BoundedGaussian { sigma } => {
                let n = Normal::new(0.0, sigma).expect("finite sigma");
                y.iter()
                    .map(|p| loop {
                        let d = Vector2::new(n.sample(rng), n.sample(rng));
                        if d.norm() <= sigma {
                            break p + d;
                        }
                    })
                    .collect()
            }
        }
    }
}

/// Rotation by `angle` about `axis`, as a plain matrix.
pub fn rotation_about(axis: &Vector3<f64>, angle: f64) -> nalgebra::Matrix3<f64> {
    Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle).into_inner()
}
