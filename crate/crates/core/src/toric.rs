//! Discretised rotation groups, group averaging and the symmetry-regularised
//! least-squares reconstruction.
//!
//! Averages are taken per vector: a point object is averaged point by point
//! (each point replaced by its orbit mean). [`orbit_closure`] is the other
//! convention, replacing the object by the union of its orbits.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{null_space, RankReport};
use crate::scene::{PointObject, ProjectionSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    /// Rotations by `2 pi j / n` about the axis.
    Cyclic,
    /// `n` rotations at the midpoints `2 pi (j + 1/2) / n`: a quadrature of
    /// the circle group that is not itself closed.
    TorusS1,
    /// The cyclic group together with its composition with the mirror through
    /// a plane containing the axis (order `2n`).
    Product,
}

/// Finite weighted set of orthogonal 3x3 matrices.
#[derive(Debug, Clone)]
pub struct SymmetryGroup {
    elements: Vec<Matrix3<f64>>,
    weights: Vec<f64>,
    closure_defect: f64,
}

impl SymmetryGroup {
    /// Validates orthogonality and weights, then measures closure.
    pub fn new(elements: Vec<Matrix3<f64>>, weights: Vec<f64>) -> Result<Self> {
        if elements.is_empty() || elements.len() != weights.len() {
            return Err(Error::invalid("need one weight per group element"));
        }
        for (i, g) in elements.iter().enumerate() {
            if (g.transpose() * g - Matrix3::identity()).amax() > 1e-12 {
                return Err(Error::invalid(format!("element {i} is not orthogonal")));
            }
        }
        if weights.iter().any(|w| !(*w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::invalid("weights must be non-negative and sum to 1"));
        }
        let closure_defect = closure(&elements);
        Ok(SymmetryGroup {
            elements,
            weights,
            closure_defect,
        })
    }

    pub fn trivial() -> Self {
        SymmetryGroup::new(vec![Matrix3::identity()], vec![1.0]).expect("identity group")
    }

    pub fn elements(&self) -> &[Matrix3<f64>] {
        &self.elements
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn order(&self) -> usize {
        self.elements.len()
    }

    /// Largest Frobenius distance from a pairwise product to the element set.
    pub fn closure_defect(&self) -> f64 {
        self.closure_defect
    }

    /// `P_G = sum_g w_g g`: the averaging operator on vectors.
    pub fn projector(&self) -> Matrix3<f64> {
        self.elements
            .iter()
            .zip(&self.weights)
            .fold(Matrix3::zeros(), |acc, (g, w)| acc + g * *w)
    }

    /// `Q = sum_g w_g (g - I)^T (g - I)`, so that `R(v) = v^T Q v`.
    pub fn regularizer_matrix(&self) -> Matrix3<f64> {
        self.elements.iter().zip(&self.weights).fold(Matrix3::zeros(), |acc, (g, w)| {
            let d = g - Matrix3::identity();
            acc + d.transpose() * d * *w
        })
    }

    /// Orthonormal basis of `{v : g v = v for all g}`.
    pub fn invariant_basis(&self) -> Vec<Vector3<f64>> {
        let q = self.regularizer_matrix();
        null_space(&DMatrix::from_iterator(3, 3, q.iter().copied()))
            .into_iter()
            .map(|v| Vector3::new(v[0], v[1], v[2]))
            .collect()
    }
}

fn closure(elements: &[Matrix3<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for a in elements {
        for b in elements {
            let p = a * b;
            let d = elements.iter().map(|g| (p - g).norm()).fold(f64::INFINITY, f64::min);
            worst = worst.max(d);
        }
    }
    worst
}

fn rotation(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    crate::scene::rotation_about(axis, angle)
}

/// A unit vector orthogonal to `axis`.
fn perpendicular(axis: &Vector3<f64>) -> Vector3<f64> {
    let a = axis.normalize();
    let e = [Vector3::x(), Vector3::y(), Vector3::z()]
        .into_iter()
        .min_by(|u, v| u.dot(&a).abs().total_cmp(&v.dot(&a).abs()))
        .expect("three candidates");
    a.cross(&e).normalize()
}

pub fn discretize_group(kind: GroupKind, n: usize, axis: &Vector3<f64>) -> Result<SymmetryGroup> {
    if n == 0 {
        return Err(Error::invalid("group needs at least one element"));
    }
    if !(axis.norm() > 0.0) || !axis.iter().all(|c| c.is_finite()) {
        return Err(Error::invalid("rotation axis must be a nonzero finite vector"));
    }
    let a = axis.normalize();
    let cyclic: Vec<Matrix3<f64>> = (0..n).map(|j| rotation(&a, 2.0 * PI * j as f64 / n as f64)).collect();
    let elements = match kind {
        GroupKind::Cyclic => cyclic,
        GroupKind::TorusS1 => (0..n).map(|j| rotation(&a, 2.0 * PI * (j as f64 + 0.5) / n as f64)).collect(),
        GroupKind::Product => {
            let normal = perpendicular(&a);
            let mirror = Matrix3::identity() - normal * normal.transpose() * 2.0;
            let mut all = cyclic.clone();
            all.extend(cyclic.iter().map(|r| r * mirror));
            all
        }
    };
    let m = elements.len();
    SymmetryGroup::new(elements, vec![1.0 / m as f64; m])
}

/// Parses `kind:n:axis`, e.g. `cyclic:5:z` or `torus_s1:360:0,0,1`.
pub fn parse_group_spec(spec: &str) -> Result<SymmetryGroup> {
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 {
        return Err(Error::invalid(format!("group spec {spec:?} is not kind:n:axis")));
    }
    let kind = match parts[0] {
        "cyclic" => GroupKind::Cyclic,
        "torus_s1" | "torus" => GroupKind::TorusS1,
        "product" => GroupKind::Product,
        other => return Err(Error::invalid(format!("unknown group kind {other:?}"))),
    };
    let n: usize = parts[1]
        .parse()
        .map_err(|_| Error::invalid(format!("group order {:?} is not a count", parts[1])))?;
    let axis = match parts[2] {
        "x" => Vector3::x(),
        "y" => Vector3::y(),
        "z" => Vector3::z(),
        s => {
            let c: std::result::Result<Vec<f64>, _> = s.split(',').map(str::parse::<f64>).collect();
            match c {
                Ok(c) if c.len() == 3 => Vector3::new(c[0], c[1], c[2]),
                _ => return Err(Error::invalid(format!("axis {s:?} is not x, y, z or three numbers"))),
            }
        }
    };
    discretize_group(kind, n, &axis)
}

pub fn group_average(group: &SymmetryGroup, v: &Vector3<f64>) -> Vector3<f64> {
    group
        .elements
        .iter()
        .zip(&group.weights)
        .fold(Vector3::zeros(), |acc, (g, w)| acc + g * v * *w)
}

/// Per-point orbit mean; weights and label are kept.
pub fn group_average_object(group: &SymmetryGroup, obj: &PointObject) -> PointObject {
    obj.map_points(|p| group_average(group, p))
}

/// Union of the orbits of every point, each copy carrying `w_g` times the
/// original weight.
pub fn orbit_closure(group: &SymmetryGroup, obj: &PointObject) -> Result<PointObject> {
    let mut points = Vec::with_capacity(obj.len() * group.order());
    let mut weights = Vec::with_capacity(points.capacity());
    for (p, w) in obj.points().iter().zip(obj.weights()) {
        for (g, wg) in group.elements.iter().zip(&group.weights) {
            points.push(g * p);
            weights.push(w * wg);
        }
    }
    PointObject::new(obj.label(), points, weights)
}

/// `R(v) = sum_g w_g |g v - v|^2`.
pub fn symmetry_regularizer(group: &SymmetryGroup, v: &Vector3<f64>) -> f64 {
    group
        .elements
        .iter()
        .zip(&group.weights)
        .map(|(g, w)| w * (g * v - v).norm_squared())
        .sum()
}

/// Sum of [`symmetry_regularizer`] over the points of an object.
pub fn symmetry_regularizer_points(group: &SymmetryGroup, points: &[Vector3<f64>]) -> f64 {
    points.iter().map(|p| symmetry_regularizer(group, p)).sum()
}

/// Projections, one image per projection (each a list of 2-D points in a
/// common order), regularisation weight and symmetry group.
#[derive(Debug, Clone)]
pub struct EquivariantProblem {
    pub projections: Vec<ProjectionSpec>,
    pub images: Vec<Vec<Vector2<f64>>>,
    pub lambda: f64,
    pub group: SymmetryGroup,
}

#[derive(Debug, Clone)]
pub struct EquivariantSolution {
    pub points: Vec<Vector3<f64>>,
    /// `sum_i sum_p |M_i p + o_i - y_ip|^2`.
    pub fidelity: f64,
    /// `sum_p R(p)`.
    pub reg: f64,
}

impl EquivariantProblem {
    fn validate(&self) -> Result<usize> {
        if self.projections.is_empty() || self.projections.len() != self.images.len() {
            return Err(Error::invalid("need one image per projection"));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::invalid("lambda must be finite and non-negative"));
        }
        let n = self.images[0].len();
        if n == 0 || self.images.iter().any(|im| im.len() != n) {
            return Err(Error::invalid("all images must list the same non-zero number of points"));
        }
        Ok(n)
    }

    fn normal_matrix(&self) -> Matrix3<f64> {
        self.projections
            .iter()
            .fold(Matrix3::zeros(), |acc, p| acc + p.matrix().transpose() * p.matrix())
    }

    fn rhs(&self, k: usize) -> Vector3<f64> {
        self.projections
            .iter()
            .zip(&self.images)
            .fold(Vector3::zeros(), |acc, (p, im)| acc + p.matrix().transpose() * (im[k] - p.offset()))
    }

    pub fn fidelity(&self, points: &[Vector3<f64>]) -> f64 {
        self.projections
            .iter()
            .zip(&self.images)
            .map(|(p, im)| {
                points
                    .iter()
                    .zip(im)
                    .map(|(x, y)| (p.apply(x) - y).norm_squared())
                    .sum::<f64>()
            })
            .sum()
    }

    fn finish(&self, points: Vec<Vector3<f64>>) -> EquivariantSolution {
        EquivariantSolution {
            fidelity: self.fidelity(&points),
            reg: symmetry_regularizer_points(&self.group, &points),
            points,
        }
    }
}

fn ill_posed3(m: &Matrix3<f64>) -> Error {
    let d = DMatrix::from_iterator(3, 3, m.iter().copied());
    crate::scene::ill_posed(&d, &RankReport::of(&d), 3)
}

/// Closed-form minimiser of fidelity + `lambda` * regulariser via the
/// normal equations `(sum M^T M + lambda Q) p = sum M^T (y - o)`.
pub fn solve_equivariant(prob: &EquivariantProblem) -> Result<EquivariantSolution> {
    let n = prob.validate()?;
    let lhs = prob.normal_matrix() + prob.group.regularizer_matrix() * prob.lambda;
    let report = RankReport::of(&DMatrix::from_iterator(3, 3, lhs.iter().copied()));
    if report.rank < 3 {
        return Err(ill_posed3(&lhs));
    }
    let chol = lhs.cholesky().ok_or_else(|| ill_posed3(&lhs))?;
    let points = (0..n).map(|k| chol.solve(&prob.rhs(k))).collect();
    Ok(prob.finish(points))
}

/// Fidelity minimiser restricted to the invariant subspace: the
/// `lambda -> infinity` limit of [`solve_equivariant`].
pub fn solve_constrained(prob: &EquivariantProblem) -> Result<EquivariantSolution> {
    let n = prob.validate()?;
    let basis = prob.group.invariant_basis();
    if basis.is_empty() {
        return Ok(prob.finish(vec![Vector3::zeros(); n]));
    }
    let b = DMatrix::from_iterator(3, basis.len(), basis.iter().flat_map(|v| v.iter().copied()));
    let nm = prob.normal_matrix();
    let nm = DMatrix::from_iterator(3, 3, nm.iter().copied());
    let reduced = b.transpose() * &nm * &b;
    let report = RankReport::of(&reduced);
    if report.rank < basis.len() {
        return Err(crate::scene::ill_posed(&reduced, &report, basis.len()));
    }
    let chol = reduced.clone().cholesky().ok_or_else(|| crate::scene::ill_posed(&reduced, &report, basis.len()))?;
    let points = (0..n)
        .map(|k| {
            let r = prob.rhs(k);
            let c = chol.solve(&(b.transpose() * DVector::from_column_slice(r.as_slice())));
            let p = &b * c;
            Vector3::new(p[0], p[1], p[2])
        })
        .collect();
    Ok(prob.finish(points))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterativeOptions {
    pub step: f64,
    pub max_iterations: usize,
    pub relative_tolerance: f64,
}

impl Default for IterativeOptions {
    fn default() -> Self {
        IterativeOptions {
            step: 0.1,
            max_iterations: 100_000,
            relative_tolerance: 1e-10,
        }
    }
}

/// A possibly nonlinear projection `R^3 -> R^2`.
pub type ProjectionModel<'a> = &'a (dyn Fn(&Vector3<f64>) -> Vector2<f64> + Sync);

/// Fixed-step gradient descent for arbitrary (possibly nonlinear)
/// projection models; gradients of the models by central differences.
/// Each point is solved independently.
pub fn solve_equivariant_iterative(
    models: &[ProjectionModel<'_>],
    images: &[Vec<Vector2<f64>>],
    lambda: f64,
    group: &SymmetryGroup,
    start: &[Vector3<f64>],
    opts: &IterativeOptions,
) -> Result<Vec<Vector3<f64>>> {
    if models.is_empty() || models.len() != images.len() {
        return Err(Error::invalid("need one image per projection model"));
    }
    if images.iter().any(|im| im.len() != start.len()) {
        return Err(Error::invalid("images and start must list the same points"));
    }
    if !(opts.step > 0.0) {
        return Err(Error::invalid("step must be positive"));
    }
    let q = group.regularizer_matrix();
    let mut out = Vec::with_capacity(start.len());
    for (k, &p0) in start.iter().enumerate() {
        let mut p = p0;
        for iteration in 0..opts.max_iterations {
            let mut grad = q * p * (2.0 * lambda);
            for (model, im) in models.iter().zip(images) {
                let r = model(&p) - im[k];
                for j in 0..3 {
                    let h = 1e-6 * p[j].abs().max(1.0);
                    let mut a = p;
                    let mut b = p;
                    a[j] += h;
                    b[j] -= h;
                    let d = (model(&a) - model(&b)) / (2.0 * h);
                    grad[j] += 2.0 * r.dot(&d);
                }
            }
            let next = p - grad * opts.step;
            if !next.iter().all(|v| v.is_finite()) {
                return Err(Error::FitDiverged {
                    iteration,
                    loss: f64::INFINITY,
                    initial: p0.norm(),
                });
            }
            let change = (next - p).norm();
            p = next;
            if change <= opts.relative_tolerance * p.norm().max(1e-300) {
                break;
            }
        }
        out.push(p);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix2x3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng) -> Vector3<f64> {
        Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0))
    }

    #[test]
    fn trivial_cyclic_group() {
        let g = discretize_group(GroupKind::Cyclic, 1, &Vector3::new(0.3, 1.0, -2.0)).unwrap();
        assert_eq!(g.order(), 1);
        assert_eq!(g.weights(), &[1.0]);
        assert!((g.elements()[0] - Matrix3::identity()).norm() < 1e-15);
        let v = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(group_average(&SymmetryGroup::trivial(), &v), v);
    }

    #[test]
    fn c4_is_closed() {
        let g = discretize_group(GroupKind::Cyclic, 4, &Vector3::z()).unwrap();
        let quarter = g.elements()[1];
        let sq = quarter * quarter;
        assert!((sq - g.elements()[2]).norm() < 1e-15);
        assert!(g.closure_defect() < 1e-15);
    }

    #[test]
    fn torus_closure_defect() {
        let g = discretize_group(GroupKind::TorusS1, 360, &Vector3::z()).unwrap();
        let d = g.closure_defect();
        assert!(d > 0.0);
        assert!(d <= 2.0 * (PI / 360.0).sin());
        // products land halfway between samples: 2 sqrt(2) sin(pi / 2n)
        assert!((d - 2.0 * 2f64.sqrt() * (PI / 720.0).sin()).abs() < 1e-12);
    }

    #[test]
    fn zero_axis_rejected() {
        assert!(matches!(discretize_group(GroupKind::Cyclic, 3, &Vector3::zeros()), Err(Error::InvalidArgument(_))));
        assert!(discretize_group(GroupKind::Cyclic, 0, &Vector3::z()).is_err());
    }

    #[test]
    fn c2_average_keeps_axis_component() {
        let g = discretize_group(GroupKind::Cyclic, 2, &Vector3::z()).unwrap();
        let avg = group_average(&g, &Vector3::new(1.5, -2.0, 0.7));
        assert!((avg - Vector3::new(0.0, 0.0, 0.7)).norm() < 1e-15);
        assert!((symmetry_regularizer(&g, &Vector3::x()) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn c5_average_is_axis_projector() {
        let axis = Vector3::new(1.0, -2.0, 0.5).normalize();
        let g = discretize_group(GroupKind::Cyclic, 5, &axis).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let proj = axis * axis.transpose();
        for _ in 0..20 {
            let v = rand_vec(&mut rng);
            let avg = group_average(&g, &v);
            for e in g.elements() {
                assert!((e * avg - avg).norm() <= 1e-12);
            }
            assert!((avg - proj * v).norm() <= 1e-12);
            assert!((group_average(&g, &avg) - avg).norm() <= 1e-15);
        }
    }

    #[test]
    fn regularizer_identity() {
        // for orthogonal groups R(v) = 2 (|v|^2 - v . avg(v))
        let g = discretize_group(GroupKind::Product, 6, &Vector3::new(0.2, 0.3, 1.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let v = rand_vec(&mut rng);
            let direct = symmetry_regularizer(&g, &v);
            let identity = 2.0 * (v.norm_squared() - v.dot(&group_average(&g, &v)));
            assert!((direct - identity).abs() <= 1e-12);
            // P_G is an orthogonal projector, so v . avg(v) = |avg(v)|^2
            let via_avg = 2.0 * (v.norm_squared() - group_average(&g, &v).norm_squared());
            assert!((direct - via_avg).abs() <= 1e-12);
            assert!((direct - v.dot(&(g.regularizer_matrix() * v))).abs() <= 1e-12);
            let inv = group_average(&g, &v);
            assert!(symmetry_regularizer(&g, &inv) <= 1e-24);
        }
    }

    #[test]
    fn product_group_is_closed() {
        let g = discretize_group(GroupKind::Product, 5, &Vector3::z()).unwrap();
        assert_eq!(g.order(), 10);
        assert!(g.closure_defect() < 1e-14);
        assert_eq!(g.invariant_basis().len(), 1);
    }

    #[test]
    fn group_spec_parsing() {
        assert_eq!(parse_group_spec("cyclic:5:z").unwrap().order(), 5);
        assert_eq!(parse_group_spec("product:3:0,1,0").unwrap().order(), 6);
        assert!(parse_group_spec("cyclic:5").is_err());
        assert!(parse_group_spec("spiral:5:z").is_err());
        assert!(parse_group_spec("cyclic:5:0,0").is_err());
    }

    fn two_view_problem(points: &[Vector3<f64>], lambda: f64, group: SymmetryGroup) -> EquivariantProblem {
        let projections = vec![ProjectionSpec::from_tilt(-0.5), ProjectionSpec::from_tilt(0.8)];
        let images = projections.iter().map(|p| points.iter().map(|x| p.apply(x)).collect()).collect();
        EquivariantProblem {
            projections,
            images,
            lambda,
            group,
        }
    }

    #[test]
    fn unregularized_recovers_planted_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<_> = (0..10).map(|_| rand_vec(&mut rng)).collect();
        let g = discretize_group(GroupKind::Cyclic, 5, &Vector3::z()).unwrap();
        let sol = solve_equivariant(&two_view_problem(&pts, 0.0, g)).unwrap();
        for (a, b) in sol.points.iter().zip(&pts) {
            assert!((a - b).norm() <= 1e-10);
        }
        assert!(sol.fidelity < 1e-20);
    }

    #[test]
    fn large_lambda_matches_constrained() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<_> = (0..10).map(|_| rand_vec(&mut rng)).collect();
        let g = discretize_group(GroupKind::Cyclic, 5, &Vector3::z()).unwrap();
        let prob = two_view_problem(&pts, 1e9, g.clone());
        let sol = solve_equivariant(&prob).unwrap();
        let con = solve_constrained(&prob).unwrap();
        for (a, b) in sol.points.iter().zip(&con.points) {
            assert!((a - b).norm() <= 1e-6);
            assert!((group_average(&g, a) - a).norm() <= 1e-6);
        }
    }

    #[test]
    fn singular_normal_matrix_is_ill_posed() {
        let prob = EquivariantProblem {
            projections: vec![ProjectionSpec::identity_xy()],
            images: vec![vec![Vector2::new(1.0, 2.0)]],
            lambda: 0.0,
            group: SymmetryGroup::trivial(),
        };
        match solve_equivariant(&prob) {
            Err(Error::IllPosed { rank, null_space, .. }) => {
                assert_eq!(rank, 2);
                assert_eq!(null_space.len(), 1);
            }
            other => panic!("{other:?}"),
        }
        // the cyclic regulariser pins the unseen x/y mix but not z: still singular
        let prob = EquivariantProblem {
            group: discretize_group(GroupKind::Cyclic, 5, &Vector3::z()).unwrap(),
            lambda: 1.0,
            ..prob
        };
        assert!(matches!(solve_equivariant(&prob), Err(Error::IllPosed { .. })));
    }

    #[test]
    fn regularizer_is_monotone_in_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<_> = (0..6).map(|_| rand_vec(&mut rng)).collect();
        let g = discretize_group(GroupKind::Cyclic, 5, &Vector3::new(0.1, 0.2, 1.0)).unwrap();
        let mut last = f64::INFINITY;
        for e in -4..=6 {
            let sol = solve_equivariant(&two_view_problem(&pts, 10f64.powi(e), g.clone())).unwrap();
            assert!(sol.reg <= last * (1.0 + 1e-12));
            last = sol.reg;
        }
    }

    #[test]
    fn solution_is_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pts: Vec<_> = (0..5).map(|_| rand_vec(&mut rng)).collect();
        let g = discretize_group(GroupKind::Cyclic, 5, &Vector3::z()).unwrap();
        let prob = two_view_problem(&pts, 0.7, g.clone());
        let base = solve_equivariant(&prob).unwrap();
        for h in g.elements() {
            // viewing h-rotated space through M h^T leaves every image unchanged
            let projections = prob
                .projections
                .iter()
                .map(|p| {
                    let m: Matrix2x3<f64> = p.matrix() * h.transpose();
                    ProjectionSpec::new(m, *p.offset()).unwrap()
                })
                .collect();
            let moved = EquivariantProblem {
                projections,
                ..prob.clone()
            };
            let sol = solve_equivariant(&moved).unwrap();
            for (a, b) in sol.points.iter().zip(&base.points) {
                assert!((a - h * b).norm() <= 1e-10);
            }
        }
    }

    #[test]
    fn iterative_matches_closed_form() {
        let pts = vec![Vector3::new(0.3, -0.2, 0.9), Vector3::new(-0.5, 0.4, 0.1)];
        let g = discretize_group(GroupKind::Cyclic, 3, &Vector3::z()).unwrap();
        let prob = two_view_problem(&pts, 0.5, g.clone());
        let closed = solve_equivariant(&prob).unwrap();
        let m0 = prob.projections[0].clone();
        let m1 = prob.projections[1].clone();
        let f0 = move |p: &Vector3<f64>| m0.apply(p);
        let f1 = move |p: &Vector3<f64>| m1.apply(p);
        let models: [ProjectionModel<'_>; 2] = [&f0, &f1];
        let it = solve_equivariant_iterative(&models, &prob.images, 0.5, &g, &[Vector3::zeros(); 2], &IterativeOptions::default()).unwrap();
        for (a, b) in it.iter().zip(&closed.points) {
            assert!((a - b).norm() < 1e-7);
        }
    }

    #[test]
    fn orbit_closure_preserves_mass() {
        let g = discretize_group(GroupKind::Cyclic, 5, &Vector3::z()).unwrap();
        let obj = PointObject::new("p", vec![Vector3::new(1.0, 0.0, 0.5)], vec![2.0]).unwrap();
        let orb = orbit_closure(&g, &obj).unwrap();
        assert_eq!(orb.len(), 5);
        assert!((orb.total_weight() - 2.0).abs() < 1e-14);
        assert!(orb.centroid().xy().norm() < 1e-14);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn average_is_nearest_invariant_point(v in prop::array::uniform3(-5.0..5.0f64),
                                                  us in prop::collection::vec(-5.0..5.0f64, 1..50)) {
                let g = discretize_group(GroupKind::Cyclic, 5, &Vector3::new(0.3, -0.1, 1.0)).unwrap();
                let v = Vector3::from(v);
                let avg = group_average(&g, &v);
                let axis = g.invariant_basis()[0];
                for t in us {
                    let u = axis * t;
                    prop_assert!((v - avg).norm() <= (v - u).norm() + 1e-12);
                }
            }

            #[test]
            fn average_is_idempotent(v in prop::array::uniform3(-5.0..5.0f64), n in 1usize..9) {
                let g = discretize_group(GroupKind::Product, n, &Vector3::new(1.0, 0.5, 0.2)).unwrap();
                let a = group_average(&g, &Vector3::from(v));
                prop_assert!((group_average(&g, &a) - a).norm() <= 1e-12);
            }
        }
    }
}
