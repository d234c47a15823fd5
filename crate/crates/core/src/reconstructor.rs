//! Direction solving, frame construction, initial-point search and flow
//! integration for two-projection reconstruction.
//!
//! Given the stacked projection matrix `A = [M1; M2]` (rank 3), the image
//! data at a point fixes a tangent direction `v` through `A v = rhs`. Rotating
//! the image-plane data yields three directions, i.e. a frame; the object is
//! recovered by flowing along that frame from an initial point.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::connection::Chart;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::linalg::{pinv, RankReport};
use crate::scene::{ill_posed, DualityMap, PointObject, ProjectionPair, ProjectionSpec};

/// Stacked matrix `[M1; M2]` and its singular-value report.
pub fn assemble_a(pair: &ProjectionPair) -> (DMatrix<f64>, RankReport) {
    let a = pair.stacked();
    let r = RankReport::of(&a);
    (a, r)
}

#[derive(Debug, Clone)]
pub struct ReconstructionProblem {
    pub pair: ProjectionPair,
    pub rhs1: Vector2<f64>,
    pub rhs2: Vector2<f64>,
    pub point: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirectionSolution {
    pub v: Vector3<f64>,
    /// `|A v - rhs|`; zero exactly when `rhs` lies in the image of `A`.
    pub residual: f64,
}

fn stack_rhs(r1: &Vector2<f64>, r2: &Vector2<f64>) -> DVector<f64> {
    DVector::from_column_slice(&[r1.x, r1.y, r2.x, r2.y])
}

fn solve_with(a: &DMatrix<f64>, a_pinv: &DMatrix<f64>, rhs: &DVector<f64>) -> DirectionSolution {
    let v = a_pinv * rhs;
    let residual = (a * &v - rhs).norm();
    DirectionSolution {
        v: Vector3::new(v[0], v[1], v[2]),
        residual,
    }
}

/// Least-squares solution of `A v = [rhs1; rhs2]`.
pub fn solve_direction(prob: &ReconstructionProblem) -> Result<DirectionSolution> {
    let (a, report) = assemble_a(&prob.pair);
    if report.rank < 3 {
        return Err(ill_posed(&a, &report, 3));
    }
    Ok(solve_with(&a, &pinv(&a), &stack_rhs(&prob.rhs1, &prob.rhs2)))
}

/// Expresses the second image in the coordinates of the first through the
/// duality map: `(M2, rhs2)` becomes `(D^{-1} M2, D^{-1} rhs2)`.
///
/// The solution is unchanged; the residual is unchanged whenever `rhs` is
/// compatible or `D` is orthogonal.
pub fn duality_rewrite(prob: &ReconstructionProblem) -> Result<ReconstructionProblem> {
    let d_inv = prob
        .pair
        .duality
        .matrix()
        .try_inverse()
        .ok_or_else(|| Error::invalid("duality map is not invertible"))?;
    let m2 = d_inv * prob.pair.p2.matrix();
    let p2 = ProjectionSpec::new(m2, d_inv * prob.pair.p2.offset())?.with_tag(prob.pair.p2.center_tag());
    Ok(ReconstructionProblem {
        pair: ProjectionPair::new(prob.pair.p1.clone(), p2, DualityMap::default()),
        rhs1: prob.rhs1,
        rhs2: d_inv * prob.rhs2,
        point: prob.point,
    })
}

pub fn rotation2(theta: f64) -> Matrix2<f64> {
    let (s, c) = theta.sin_cos();
    Matrix2::new(c, -s, s, c)
}

/// Default rotation angles for the second and third frame vectors.
pub const DEFAULT_THETAS: (f64, f64) = (2.0 * std::f64::consts::PI / 3.0, 4.0 * std::f64::consts::PI / 3.0);

/// Default upper bound on the per-node frame condition number.
pub const DEFAULT_CONDITION_BOUND: f64 = 1e3;

/// Three vector fields sampled on a 3-D chart grid.
#[derive(Debug, Clone)]
pub struct Frame {
    chart: Chart,
    vectors: Vec<[Vector3<f64>; 3]>,
    condition: f64,
}

fn frame_condition(v: &[Vector3<f64>; 3]) -> f64 {
    let m = Matrix3::from_columns(v);
    let sv = m.singular_values();
    let smin = sv.min();
    if smin > 0.0 {
        sv.max() / smin
    } else {
        f64::INFINITY
    }
}

fn angle_mod(t: f64) -> f64 {
    t.rem_euclid(2.0 * std::f64::consts::PI)
}

fn near_zero_mod(t: f64) -> bool {
    let r = angle_mod(t);
    r < 1e-9 || 2.0 * std::f64::consts::PI - r < 1e-9
}

impl Frame {
    /// Samples explicit vector fields; fails when any node exceeds `bound`.
    pub fn from_fn(
        chart: Chart,
        bound: f64,
        f: impl Fn(&Vector3<f64>) -> [Vector3<f64>; 3] + Sync + Send,
    ) -> Result<Self> {
        Self::from_fn_with(Exec::default(), chart, bound, f)
    }

    pub fn from_fn_with(
        exec: Exec,
        chart: Chart,
        bound: f64,
        f: impl Fn(&Vector3<f64>) -> [Vector3<f64>; 3] + Sync + Send,
    ) -> Result<Self> {
        if chart.dim() != 3 {
            return Err(Error::invalid("frame chart must be 3-dimensional"));
        }
        let vectors = exec.map(chart.node_count(), |n| {
            let x = chart.node_coords(&chart.unflat(n));
            f(&Vector3::new(x[0], x[1], x[2]))
        });
        let conds = exec.map(vectors.len(), |n| frame_condition(&vectors[n]));
        let mut worst = 0.0f64;
        for (n, &c) in conds.iter().enumerate() {
            if !(c <= bound) {
                return Err(Error::DegenerateFrame {
                    node: chart.node_coords(&chart.unflat(n)),
                    condition: c,
                    bound,
                });
            }
            worst = worst.max(c);
        }
        Ok(Frame {
            chart,
            vectors,
            condition: worst,
        })
    }

    pub fn chart(&self) -> &Chart {
        &self.chart
    }

    /// Worst spanning condition number over the grid.
    pub fn condition(&self) -> f64 {
        self.condition
    }

    pub fn node(&self, n: usize) -> &[Vector3<f64>; 3] {
        &self.vectors[n]
    }

    /// Trilinear interpolation of the three fields; `None` outside the chart.
    pub fn at(&self, p: &Vector3<f64>) -> Option<[Vector3<f64>; 3]> {
        let x = [p.x, p.y, p.z];
        if !self.chart.contains(&x) {
            return None;
        }
        let mut out = [Vector3::zeros(); 3];
        for (n, w) in self.chart.stencil(&x) {
            for (o, v) in out.iter_mut().zip(&self.vectors[n]) {
                *o += v * w;
            }
        }
        Some(out)
    }

    /// Largest residual, over interior nodes and index pairs, of expressing
    /// the finite-difference Lie bracket `[v_k, v_l]` in the frame basis.
    pub fn involutivity_defect(&self) -> f64 {
        self.involutivity_defect_with(Exec::default())
    }

    pub fn involutivity_defect_with(&self, exec: Exec) -> f64 {
        let chart = &self.chart;
        exec.map(chart.node_count(), |n| {
            let idx = chart.unflat(n);
            if !chart.is_interior(&idx) {
                return 0.0;
            }
            let v = &self.vectors[n];
            // d v_k / d x_j by central differences on the node grid
            let mut jac = [Matrix3::zeros(); 3];
            for j in 0..3 {
                let mut lo = idx.clone();
                let mut hi = idx.clone();
                lo[j] -= 1;
                hi[j] += 1;
                let (a, b) = (&self.vectors[chart.flat(&hi)], &self.vectors[chart.flat(&lo)]);
                let h2 = 2.0 * chart.spacing(j);
                for k in 0..3 {
                    jac[k].set_column(j, &((a[k] - b[k]) / h2));
                }
            }
            let basis = Matrix3::from_columns(v);
            let basis_pinv = match basis.pseudo_inverse(1e-12) {
                Ok(p) => p,
                Err(_) => return f64::INFINITY,
            };
            let mut worst = 0.0f64;
            for (k, l) in [(0, 1), (0, 2), (1, 2)] {
                let bracket = jac[l] * v[k] - jac[k] * v[l];
                let coeffs = basis_pinv * bracket;
                worst = worst.max((basis * coeffs - bracket).norm());
            }
            worst
        })
        .into_iter()
        .fold(0.0, f64::max)
    }
}

/// Frame from image-plane data. `rhs_field(p)` returns the pair of image
/// derivatives at `p`. The first vector solves the unrotated system; the
/// second rotates the first image's data by `thetas.0`, the third rotates the
/// second image's data by `thetas.1`.
pub fn build_frame(
    pair: &ProjectionPair,
    chart: Chart,
    rhs_field: impl Fn(&Vector3<f64>) -> (Vector2<f64>, Vector2<f64>) + Sync + Send,
    thetas: (f64, f64),
    bound: f64,
) -> Result<Frame> {
    build_frame_with(Exec::default(), pair, chart, rhs_field, thetas, bound)
}

pub fn build_frame_with(
    exec: Exec,
    pair: &ProjectionPair,
    chart: Chart,
    rhs_field: impl Fn(&Vector3<f64>) -> (Vector2<f64>, Vector2<f64>) + Sync + Send,
    thetas: (f64, f64),
    bound: f64,
) -> Result<Frame> {
    if !thetas.0.is_finite() || !thetas.1.is_finite() {
        return Err(Error::invalid("rotation angles must be finite"));
    }
    if near_zero_mod(thetas.0) || near_zero_mod(thetas.1) || near_zero_mod(thetas.0 - thetas.1) {
        return Err(Error::invalid("rotation angles must be distinct and nonzero modulo 2*pi"));
    }
    let (a, report) = assemble_a(pair);
    if report.rank < 3 {
        return Err(ill_posed(&a, &report, 3));
    }
    let a_pinv = pinv(&a);
    let (r2, r3) = (rotation2(thetas.0), rotation2(thetas.1));
    Frame::from_fn_with(exec, chart, bound, |p| {
        let (g1, g2) = rhs_field(p);
        [
            solve_with(&a, &a_pinv, &stack_rhs(&g1, &g2)).v,
            solve_with(&a, &a_pinv, &stack_rhs(&(r2 * g1), &g2)).v,
            solve_with(&a, &a_pinv, &stack_rhs(&g1, &(r3 * g2))).v,
        ]
    })
}

/// Orthogonal projector onto the span of three vectors.
pub fn span_projector(v: &[Vector3<f64>; 3]) -> Matrix3<f64> {
    let m = DMatrix::from_iterator(3, 3, v.iter().flat_map(|c| c.iter().copied()));
    let p = &m * pinv(&m);
    Matrix3::from_iterator(p.iter().copied())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InitialPointOptions {
    pub multistart: usize,
    pub seed: u64,
    /// Half-width of the seed box around the least-squares image solution.
    pub radius: f64,
    /// Residual norm at which a converged point counts as a root.
    pub tolerance: f64,
    /// Roots closer than this are merged.
    pub merge_radius: f64,
    pub max_iterations: usize,
}

impl Default for InitialPointOptions {
    fn default() -> Self {
        InitialPointOptions {
            multistart: 32,
            seed: 0,
            radius: 5.0,
            tolerance: 1e-8,
            merge_radius: 1e-6,
            max_iterations: 200,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RootCertificate {
    pub distinct_roots: usize,
    pub starts: usize,
    pub converged_starts: usize,
    pub best_residual: f64,
}

#[derive(Debug, Clone)]
pub struct InitialPoint {
    pub p0: Vector3<f64>,
    pub residual: f64,
    pub certificate: RootCertificate,
}

/// Residuals of the initial-point system at `p`.
fn constraint_residual(
    pair: &ProjectionPair,
    z1: &Vector2<f64>,
    c1: &Vector2<f64>,
    c2: &Vector2<f64>,
    mu: &(impl Fn(&Vector3<f64>) -> (Vector2<f64>, Vector2<f64>) + ?Sized),
    p: &Vector3<f64>,
) -> DVector<f64> {
    let e1 = pair.p1.apply(p) - z1;
    let e2 = pair.p2.apply(p) - pair.duality.apply(z1);
    let (m1, m2) = mu(p);
    let (e3, e4) = (m1 - c1, m2 - c2);
    DVector::from_column_slice(&[e1.x, e1.y, e2.x, e2.y, e3.x, e3.y, e4.x, e4.y])
}

/// Damped Gauss-Newton with a forward-difference Jacobian.
fn levenberg_marquardt(
    f: &dyn Fn(&Vector3<f64>) -> DVector<f64>,
    start: Vector3<f64>,
    max_iterations: usize,
    tolerance: f64,
) -> (Vector3<f64>, f64) {
    let mut p = start;
    let mut r = f(&p);
    let mut cost = r.norm_squared();
    let mut lambda = 1e-3;
    for _ in 0..max_iterations {
        if !cost.is_finite() || cost.sqrt() <= 0.01 * tolerance {
            break;
        }
        let mut jac = DMatrix::zeros(r.len(), 3);
        for j in 0..3 {
            let h = 1e-7 * p[j].abs().max(1.0);
            let mut q = p;
            q[j] += h;
            jac.set_column(j, &((f(&q) - &r) / h));
        }
        let jt = jac.transpose();
        let jtj = &jt * &jac;
        let g = &jt * &r;
        let mut improved = false;
        for _ in 0..30 {
            let mut lhs = jtj.clone();
            for d in 0..3 {
                lhs[(d, d)] += lambda * jtj[(d, d)].max(1e-12);
            }
            let Some(step) = lhs.lu().solve(&(-&g)) else {
                lambda *= 10.0;
                continue;
            };
            let q = p + Vector3::new(step[0], step[1], step[2]);
            let rq = f(&q);
            let cq = rq.norm_squared();
            if cq < cost {
                let small = (q - p).norm() <= 1e-15 * p.norm().max(1.0);
                p = q;
                r = rq;
                cost = cq;
                lambda = (lambda * 0.3).max(1e-12);
                improved = !small;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    (p, cost.sqrt())
}

/// Multistart search for points satisfying both image constraints and both
/// moment constraints. Exactly one distinct root is required.
#[allow(clippy::too_many_arguments)]
pub fn find_initial_point(
    pair: &ProjectionPair,
    z1: &Vector2<f64>,
    c1: &Vector2<f64>,
    c2: &Vector2<f64>,
    mu_field: impl Fn(&Vector3<f64>) -> (Vector2<f64>, Vector2<f64>) + Sync + Send,
    opts: &InitialPointOptions,
) -> Result<InitialPoint> {
    find_initial_point_with(Exec::default(), pair, z1, c1, c2, mu_field, opts)
}

pub fn find_initial_point_with(
    exec: Exec,
    pair: &ProjectionPair,
    z1: &Vector2<f64>,
    c1: &Vector2<f64>,
    c2: &Vector2<f64>,
    mu_field: impl Fn(&Vector3<f64>) -> (Vector2<f64>, Vector2<f64>) + Sync + Send,
    opts: &InitialPointOptions,
) -> Result<InitialPoint> {
    if opts.multistart == 0 {
        return Err(Error::invalid("multistart must be at least 1"));
    }
    if !(opts.radius >= 0.0 && opts.tolerance > 0.0 && opts.merge_radius > 0.0) {
        return Err(Error::invalid("radius, tolerance and merge radius must be positive"));
    }
    let a = pair.stacked();
    let b1 = z1 - pair.p1.offset();
    let b2 = pair.duality.apply(z1) - pair.p2.offset();
    let center = pinv(&a) * stack_rhs(&b1, &b2);
    let center = Vector3::new(center[0], center[1], center[2]);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let starts: Vec<Vector3<f64>> = (0..opts.multistart)
        .map(|i| {
            let jitter = Vector3::from_fn(|_, _| rng.random_range(-1.0..=1.0)) * opts.radius;
            if i == 0 {
                center
            } else {
                center + jitter
            }
        })
        .collect();

    let f = |p: &Vector3<f64>| constraint_residual(pair, z1, c1, c2, &mu_field, p);
    let results = exec.map(starts.len(), |i| {
        levenberg_marquardt(&f, starts[i], opts.max_iterations, opts.tolerance)
    });

    let best_residual = results.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    let mut roots: Vec<(Vector3<f64>, f64)> = Vec::new();
    let mut converged = 0;
    for &(p, res) in &results {
        if !(res <= opts.tolerance) {
            continue;
        }
        converged += 1;
        match roots.iter_mut().find(|(q, _)| (q - p).norm() <= opts.merge_radius) {
            Some(existing) if res < existing.1 => *existing = (p, res),
            Some(_) => {}
            None => roots.push((p, res)),
        }
    }
    match roots.len() {
        0 => Err(Error::NotFound { best_residual }),
        1 => Ok(InitialPoint {
            p0: roots[0].0,
            residual: roots[0].1,
            certificate: RootCertificate {
                distinct_roots: 1,
                starts: opts.multistart,
                converged_starts: converged,
                best_residual,
            },
        }),
        _ => {
            let mut all: Vec<Vector3<f64>> = roots.into_iter().map(|r| r.0).collect();
            all.sort_by(|x, y| {
                x.iter()
                    .zip(y.iter())
                    .map(|(a, b)| a.total_cmp(b))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
            Err(Error::Ambiguous { roots: all })
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowOptions {
    /// Largest RK4 substep; defaults to the smallest frame grid spacing.
    pub max_step: Option<f64>,
    /// Integration is refused when the frame's involutivity defect exceeds
    /// this; `None` skips the check.
    pub defect_threshold: Option<f64>,
}

impl Default for FlowOptions {
    fn default() -> Self {
        FlowOptions {
            max_step: None,
            defect_threshold: Some(1e-3),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FlowOutput {
    /// Lattice points that stayed inside the frame chart, in lattice order.
    pub object: Option<PointObject>,
    /// `(i1, i2, i3)` lattice index for each returned point.
    pub indices: Vec<[usize; 3]>,
    /// `true` when some lattice point could not be reached inside the chart.
    pub truncated: bool,
    pub defect: Option<f64>,
}

fn rk4_flow(frame: &Frame, k: usize, p: Vector3<f64>, t: f64, max_step: f64) -> Option<Vector3<f64>> {
    if t == 0.0 {
        return Some(p);
    }
    let n = ((t.abs() / max_step).ceil() as usize).max(1);
    let h = t / n as f64;
    let field = |q: &Vector3<f64>| frame.at(q).map(|v| v[k]);
    let mut q = p;
    for _ in 0..n {
        let k1 = field(&q)?;
        let k2 = field(&(q + k1 * (0.5 * h)))?;
        let k3 = field(&(q + k2 * (0.5 * h)))?;
        let k4 = field(&(q + k3 * h))?;
        q += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        if !frame.chart.contains(&[q.x, q.y, q.z]) {
            return None;
        }
    }
    Some(q)
}

/// Samples `phi3(t3) . phi2(t2) . phi1(t1) (p0)` on a lattice with `steps`
/// intervals per parameter axis. Flows use fixed-step RK4.
pub fn integrate_flows(
    frame: &Frame,
    p0: &Vector3<f64>,
    param_box: [(f64, f64); 3],
    steps: usize,
    opts: &FlowOptions,
) -> Result<FlowOutput> {
    integrate_flows_with(Exec::default(), frame, p0, param_box, steps, opts)
}

pub fn integrate_flows_with(
    exec: Exec,
    frame: &Frame,
    p0: &Vector3<f64>,
    param_box: [(f64, f64); 3],
    steps: usize,
    opts: &FlowOptions,
) -> Result<FlowOutput> {
    if steps == 0 {
        return Err(Error::invalid("steps must be at least 1"));
    }
    if param_box.iter().any(|(a, b)| !(a.is_finite() && b.is_finite() && a <= b)) {
        return Err(Error::invalid("parameter box needs finite lo <= hi"));
    }
    frame.chart.require(&[p0.x, p0.y, p0.z])?;
    let defect = match opts.defect_threshold {
        Some(threshold) => {
            let d = frame.involutivity_defect_with(exec);
            if !(d <= threshold) {
                return Err(Error::NotInvolutive { defect: d, threshold });
            }
            Some(d)
        }
        None => None,
    };
    let max_step = opts
        .max_step
        .unwrap_or_else(|| (0..3).map(|j| frame.chart.spacing(j)).fold(f64::INFINITY, f64::min));
    if !(max_step > 0.0) {
        return Err(Error::invalid("max_step must be positive"));
    }
    let dt: Vec<f64> = param_box.iter().map(|(a, b)| (b - a) / steps as f64).collect();
    let n = steps + 1;

    let lines = exec.map(n, |i1| {
        let mut out = Vec::new();
        let mut complete = true;
        let t1 = param_box[0].0 + i1 as f64 * dt[0];
        let Some(q1) = rk4_flow(frame, 0, *p0, t1, max_step) else {
            return (out, false);
        };
        let mut q2 = rk4_flow(frame, 1, q1, param_box[1].0, max_step);
        for i2 in 0..n {
            if i2 > 0 {
                q2 = q2.and_then(|q| rk4_flow(frame, 1, q, dt[1], max_step));
            }
            let Some(base) = q2 else {
                complete = false;
                break;
            };
            let mut q3 = rk4_flow(frame, 2, base, param_box[2].0, max_step);
            for i3 in 0..n {
                if i3 > 0 {
                    q3 = q3.and_then(|q| rk4_flow(frame, 2, q, dt[2], max_step));
                }
                match q3 {
                    Some(p) => out.push(([i1, i2, i3], p)),
                    None => {
                        complete = false;
                        break;
                    }
                }
            }
        }
        (out, complete)
    });

    let truncated = lines.iter().any(|(_, ok)| !ok);
    let (indices, points): (Vec<[usize; 3]>, Vec<Vector3<f64>>) = lines.into_iter().flat_map(|(pts, _)| pts).unzip();
    let object = if points.is_empty() {
        None
    } else {
        Some(PointObject::uniform("flow_lattice", points)?)
    };
    Ok(FlowOutput {
        object,
        indices,
        truncated,
        defect,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{Matrix2x3, Matrix4, Vector4};
    use std::f64::consts::PI;

    fn xy_yz() -> ProjectionPair {
        ProjectionPair::new(ProjectionSpec::identity_xy(), ProjectionSpec::yz(), DualityMap::default())
    }

    fn random_pair(seed: u64) -> ProjectionPair {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = || Matrix2x3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let (a, b) = (m(), m());
        ProjectionPair::new(
            ProjectionSpec::new(a, Vector2::zeros()).unwrap(),
            ProjectionSpec::new(b, Vector2::zeros()).unwrap(),
            DualityMap::default(),
        )
    }

    #[test]
    fn assemble_examples() {
        let (_, r) = assemble_a(&xy_yz());
        assert_eq!(r.rank, 3);
        assert_relative_eq!(r.sigma_min, 1.0, epsilon = 1e-14);
        let coaxial = ProjectionPair::new(ProjectionSpec::identity_xy(), ProjectionSpec::identity_xy(), DualityMap::default());
        assert_eq!(assemble_a(&coaxial).1.rank, 2);
    }

    #[test]
    fn sigma_min_matches_gram_eigenvalues() {
        let pair = random_pair(3);
        let (a, r) = assemble_a(&pair);
        assert_eq!(r.rank, 3);
        let ev = (a.transpose() * &a).symmetric_eigen().eigenvalues;
        let lmin = ev.iter().copied().fold(f64::INFINITY, f64::min);
        assert_relative_eq!(r.sigma_min, lmin.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn plant_and_recover_direction() {
        let pair = random_pair(4);
        let v = Vector3::new(0.3, -1.4, 2.2);
        let prob = ReconstructionProblem {
            rhs1: pair.p1.matrix() * v,
            rhs2: pair.p2.matrix() * v,
            pair,
            point: Vector3::zeros(),
        };
        let s = solve_direction(&prob).unwrap();
        assert!((s.v - v).norm() <= 1e-12);
        assert!(s.residual <= 1e-12);
    }

    #[test]
    fn zero_rhs_gives_zero() {
        let prob = ReconstructionProblem {
            pair: xy_yz(),
            rhs1: Vector2::zeros(),
            rhs2: Vector2::zeros(),
            point: Vector3::zeros(),
        };
        assert_eq!(solve_direction(&prob).unwrap().v, Vector3::zeros());
    }

    #[test]
    fn orthogonal_perturbation_moves_only_residual() {
        let pair = xy_yz();
        let (a, _) = assemble_a(&pair);
        // left null vector of A: duplicated y rows
        let n = DVector::from_column_slice(&[0., 1., -1., 0.]) / 2f64.sqrt();
        assert!((a.transpose() * &n).norm() < 1e-15);
        let v = Vector3::new(1., 2., 3.);
        let eps = 1e-3;
        let b = &a * DVector::from_column_slice(v.as_slice()) + &n * eps;
        let prob = ReconstructionProblem {
            pair,
            rhs1: Vector2::new(b[0], b[1]),
            rhs2: Vector2::new(b[2], b[3]),
            point: Vector3::zeros(),
        };
        let s = solve_direction(&prob).unwrap();
        assert!((s.v - v).norm() < 1e-12);
        assert_relative_eq!(s.residual, eps, epsilon = 1e-12);
    }

    #[test]
    fn coaxial_pair_is_ill_posed() {
        let pair = ProjectionPair::new(ProjectionSpec::identity_xy(), ProjectionSpec::identity_xy(), DualityMap::default());
        let prob = ReconstructionProblem {
            pair,
            rhs1: Vector2::new(1., 0.),
            rhs2: Vector2::new(1., 0.),
            point: Vector3::zeros(),
        };
        match solve_direction(&prob) {
            Err(Error::IllPosed { rank, .. }) => assert_eq!(rank, 2),
            other => panic!("{other:?}"),
        }
    }

    fn linear_rhs(pair: &ProjectionPair) -> impl Fn(&Vector3<f64>) -> (Vector2<f64>, Vector2<f64>) + Sync + Send + '_ {
        let b = Vector3::new(0.7, -0.4, 1.1);
        let l = Matrix3::new(0.1, -0.05, 0.02, 0.03, 0.08, -0.04, -0.02, 0.05, 0.06);
        move |p| {
            let u = b + l * p;
            (pair.p1.matrix() * u, pair.p2.matrix() * u)
        }
    }

    #[test]
    fn default_thetas_give_well_conditioned_frame() {
        let pair = xy_yz();
        let chart = Chart::cube(3, -1.0, 1.0, 9).unwrap();
        let frame = build_frame(&pair, chart, linear_rhs(&pair), DEFAULT_THETAS, DEFAULT_CONDITION_BOUND).unwrap();
        assert!(frame.condition() <= 10.0, "condition {}", frame.condition());
    }

    #[test]
    fn coincident_thetas_rejected() {
        let pair = xy_yz();
        let chart = Chart::cube(3, -1.0, 1.0, 3).unwrap();
        for t in [(0.0, 0.0), (1.0, 1.0), (0.0, 1.0), (1.0, 2.0 * PI)] {
            assert!(matches!(
                build_frame(&pair, chart.clone(), linear_rhs(&pair), t, 1e3),
                Err(Error::InvalidArgument(_))
            ));
        }
    }

    #[test]
    fn degenerate_frame_reports_node() {
        let pair = xy_yz();
        let chart = Chart::cube(3, -1.0, 1.0, 3).unwrap();
        // zero image data at x = 0: every frame vector vanishes there
        let rhs = |p: &Vector3<f64>| (Vector2::new(p.x, p.x), Vector2::new(p.x, p.x));
        match build_frame(&pair, chart, rhs, DEFAULT_THETAS, 1e3) {
            Err(Error::DegenerateFrame { node, .. }) => assert_eq!(node.len(), 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn common_rotation_preserves_span() {
        let pair = random_pair(8);
        let chart = Chart::cube(3, -1.0, 1.0, 3).unwrap();
        let f1 = build_frame(&pair, chart.clone(), linear_rhs(&pair), DEFAULT_THETAS, 1e6).unwrap();
        let shifted = (DEFAULT_THETAS.0 + 0.4, DEFAULT_THETAS.1 + 0.4);
        let f2 = build_frame(&pair, chart.clone(), linear_rhs(&pair), shifted, 1e6).unwrap();
        for n in 0..chart.node_count() {
            let d = (span_projector(f1.node(n)) - span_projector(f2.node(n))).norm();
            assert!(d <= 1e-10);
        }
    }

    #[test]
    fn linear_frame_is_involutive() {
        let pair = xy_yz();
        let chart = Chart::cube(3, 0.0, 1.0, 17).unwrap();
        let frame = build_frame(&pair, chart, linear_rhs(&pair), DEFAULT_THETAS, 1e3).unwrap();
        assert!(frame.involutivity_defect() <= 1e-4);
    }

    fn coaxial_pair() -> ProjectionPair {
        ProjectionPair::new(ProjectionSpec::identity_xy(), ProjectionSpec::identity_xy(), DualityMap::default())
    }

    #[test]
    fn single_root_for_linear_moments() {
        let pair = random_pair(5);
        let p_star = Vector3::new(0.4, -0.9, 1.3);
        let z1 = pair.p1.apply(&p_star);
        // duality chosen consistent with the planted point
        let d = DualityMap::new(Matrix2::identity(), pair.p2.apply(&p_star) - z1).unwrap();
        let pair = ProjectionPair::new(pair.p1, pair.p2, d);
        let mu = |p: &Vector3<f64>| (Vector2::new(p.x + 2.0 * p.z, p.y), Vector2::new(p.z - p.y, 3.0 * p.x));
        let (c1, c2) = mu(&p_star);
        let ip = find_initial_point(&pair, &z1, &c1, &c2, mu, &InitialPointOptions::default()).unwrap();
        assert!((ip.p0 - p_star).norm() <= 1e-9);
        assert_eq!(ip.certificate.distinct_roots, 1);

        let bad_c1 = c1 + Vector2::new(0.5, 0.0);
        assert!(matches!(
            find_initial_point(&pair, &z1, &bad_c1, &c2, mu, &InitialPointOptions::default()),
            Err(Error::NotFound { .. })
        ));
    }

    #[test]
    fn quadratic_moment_has_two_roots() {
        // along the viewing line x = 0.5, y = -0.25 the quadratic moment
        // vanishes at z = 1 and z = -2
        let pair = coaxial_pair();
        let z1 = Vector2::new(0.5, -0.25);
        let mu = |p: &Vector3<f64>| (Vector2::new((p.z - 1.0) * (p.z + 2.0), p.x - 0.5), Vector2::new(p.y + 0.25, 0.0));
        let zero = Vector2::zeros();
        let opts = InitialPointOptions {
            multistart: 48,
            seed: 2,
            ..Default::default()
        };
        match find_initial_point(&pair, &z1, &zero, &zero, mu, &opts) {
            Err(Error::Ambiguous { roots }) => {
                assert_eq!(roots.len(), 2);
                assert!((roots[0] - Vector3::new(0.5, -0.25, -2.0)).norm() < 1e-8);
                assert!((roots[1] - Vector3::new(0.5, -0.25, 1.0)).norm() < 1e-8);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn multistart_is_policy_independent() {
        let pair = coaxial_pair();
        let z1 = Vector2::new(0.5, -0.25);
        let mu = |p: &Vector3<f64>| (Vector2::new(p.z * p.z - 1.0, 0.0), Vector2::zeros());
        let zero = Vector2::zeros();
        let opts = InitialPointOptions::default();
        let a = find_initial_point_with(Exec::Sequential, &pair, &z1, &zero, &zero, mu, &opts);
        let b = find_initial_point_with(Exec::Parallel, &pair, &z1, &zero, &zero, mu, &opts);
        match (a, b) {
            (Err(Error::Ambiguous { roots: r1 }), Err(Error::Ambiguous { roots: r2 })) => assert_eq!(r1, r2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unit_frame_gives_cube_lattice() {
        let chart = Chart::cube(3, -0.5, 1.5, 5).unwrap();
        let e = [Vector3::x(), Vector3::y(), Vector3::z()];
        let frame = Frame::from_fn(chart, 10.0, |_| e).unwrap();
        let out = integrate_flows(&frame, &Vector3::zeros(), [(0.0, 1.0); 3], 2, &FlowOptions::default()).unwrap();
        assert!(!out.truncated);
        let obj = out.object.unwrap();
        assert_eq!(obj.len(), 27);
        for (idx, p) in out.indices.iter().zip(obj.points()) {
            let expect = Vector3::new(idx[0] as f64, idx[1] as f64, idx[2] as f64) * 0.5;
            assert!((p - expect).norm() < 1e-14);
        }
    }

    #[test]
    fn commuting_linear_frame_matches_matrix_exponential() {
        // v_k(p) = B_k p + b_k with diagonal B_k: augmented generators commute
        let bs = [
            (Matrix3::from_diagonal(&Vector3::new(0.1, -0.08, 0.05)), Vector3::new(1.0, 0.1, 0.0)),
            (Matrix3::from_diagonal(&Vector3::new(-0.05, 0.1, 0.02)), Vector3::new(0.0, 1.0, 0.1)),
            (Matrix3::from_diagonal(&Vector3::new(0.03, 0.05, -0.1)), Vector3::new(0.1, 0.0, 1.0)),
        ];
        let chart = Chart::cube(3, -1.0, 2.0, 25).unwrap();
        let frame = Frame::from_fn(chart, 1e3, |p| [0, 1, 2].map(|k| bs[k].0 * p + bs[k].1)).unwrap();
        let aug = |k: usize| {
            let mut m = Matrix4::zeros();
            m.fixed_view_mut::<3, 3>(0, 0).copy_from(&bs[k].0);
            m.fixed_view_mut::<3, 1>(0, 3).copy_from(&bs[k].1);
            m
        };
        let p0 = Vector3::new(0.1, -0.2, 0.3);
        let bx = [(0.0, 1.0), (-0.5, 0.5), (0.0, 0.8)];
        let out = integrate_flows(&frame, &p0, bx, 4, &FlowOptions::default()).unwrap();
        assert!(!out.truncated);
        for (idx, p) in out.indices.iter().zip(out.object.unwrap().points()) {
            let t: Vec<f64> = (0..3).map(|k| bx[k].0 + idx[k] as f64 * (bx[k].1 - bx[k].0) / 4.0).collect();
            let g = (aug(2) * t[2]).exp() * (aug(1) * t[1]).exp() * (aug(0) * t[0]).exp();
            let q = g * Vector4::new(p0.x, p0.y, p0.z, 1.0);
            assert!((p - q.xyz()).norm() <= 1e-8);
        }
    }

    #[test]
    fn leaving_chart_truncates() {
        let chart = Chart::cube(3, 0.0, 1.0, 5).unwrap();
        let frame = Frame::from_fn(chart, 10.0, |_| [Vector3::x(), Vector3::y(), Vector3::z()]).unwrap();
        let out = integrate_flows(&frame, &Vector3::new(0.5, 0.5, 0.5), [(0.0, 1.0); 3], 4, &FlowOptions::default()).unwrap();
        assert!(out.truncated);
        assert_eq!(out.indices.len(), 27);
    }

    #[test]
    fn duality_rewrite_keeps_solution() {
        let pair = random_pair(6);
        let d = DualityMap::new(Matrix2::new(2.0, 0.5, -0.3, 1.5), Vector2::new(0.1, 0.2)).unwrap();
        let pair = ProjectionPair::new(pair.p1, pair.p2, d);
        let v = Vector3::new(-0.3, 0.8, 1.7);
        let prob = ReconstructionProblem {
            rhs1: pair.p1.matrix() * v,
            rhs2: pair.p2.matrix() * v,
            pair,
            point: Vector3::zeros(),
        };
        let a = solve_direction(&prob).unwrap();
        let b = solve_direction(&duality_rewrite(&prob).unwrap()).unwrap();
        assert!((a.v - b.v).norm() <= 1e-12);
        assert!((a.residual - b.residual).abs() <= 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn solve_direction_is_linear(seed in 0u64..1000, c in -10.0..10.0f64,
                                         r in prop::array::uniform4(-3.0..3.0f64)) {
                let pair = random_pair(seed);
                prop_assume!(assemble_a(&pair).1.sigma_min > 1e-3);
                let base = ReconstructionProblem {
                    pair: pair.clone(),
                    rhs1: Vector2::new(r[0], r[1]),
                    rhs2: Vector2::new(r[2], r[3]),
                    point: Vector3::zeros(),
                };
                let scaled = ReconstructionProblem { rhs1: base.rhs1 * c, rhs2: base.rhs2 * c, ..base.clone() };
                let a = solve_direction(&base).unwrap();
                let b = solve_direction(&scaled).unwrap();
                prop_assert!((a.v * c - b.v).norm() <= 1e-9 * (1.0 + b.v.norm()));
            }

            #[test]
            fn orthogonal_duality_keeps_residual(seed in 0u64..1000, angle in 0.0..std::f64::consts::TAU,
                                                 r in prop::array::uniform4(-3.0..3.0f64)) {
                let pair = random_pair(seed);
                prop_assume!(assemble_a(&pair).1.sigma_min > 1e-2);
                let d = DualityMap::new(rotation2(angle), Vector2::zeros()).unwrap();
                let prob = ReconstructionProblem {
                    pair: ProjectionPair::new(pair.p1, pair.p2, d),
                    rhs1: Vector2::new(r[0], r[1]),
                    rhs2: Vector2::new(r[2], r[3]),
                    point: Vector3::zeros(),
                };
                let a = solve_direction(&prob).unwrap();
                let b = solve_direction(&duality_rewrite(&prob).unwrap()).unwrap();
                prop_assert!((a.v - b.v).norm() <= 1e-9 * (1.0 + a.v.norm()));
                prop_assert!((a.residual - b.residual).abs() <= 1e-12 * (1.0 + a.residual));
            }
        }
    }
}
