//! One pipeline per subcommand. Each fills a [`Report`] and returns the
//! first module error, if any; metrics gathered before the error stay in the
//! report.

use nalgebra::{DMatrix, Matrix2, Matrix3, Matrix4, Vector2, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use folirec_core::connection::{
    build_field, curvature_integral, generator_arity, holonomy_loop, stokes_residual, AffineField, Chart,
    ConnectionField, Generator,
};
use folirec_core::imputer::{self, Dataset, FitOptions, Mask};
use folirec_core::linalg::{expm, hausdorff, pinv, RankReport};
use folirec_core::reconstructor::{
    build_frame, find_initial_point, integrate_flows, rotation2, FlowOptions, InitialPointOptions,
    DEFAULT_CONDITION_BOUND, DEFAULT_THETAS,
};
use folirec_core::scene::{
    generate_object, project, radon_system, radon_transform, solve_two_projection_points, DualityMap, Matching,
    PixelNoise, PointObject, ProjectionPair, ProjectionSpec,
};
use folirec_core::star::{associator_sweep, criterion_verdict, moufang_table_residual, LoopTable, StarContext};
use folirec_core::toric::{self, group_average, parse_group_spec, EquivariantProblem};
use folirec_core::Error;

use crate::config::{
    AlgebraParams, DataSource, HolonomyParams, ImputeParams, Pairing, PipelineParams, RadonParams, ReconParams,
    ToricParams,
};
use crate::report::Report;

type Outcome = Result<(), Error>;

fn tilt_pair(tilts: [f64; 2]) -> ProjectionPair {
    ProjectionPair::new(
        ProjectionSpec::from_tilt(tilts[0]),
        ProjectionSpec::from_tilt(tilts[1]),
        DualityMap::default(),
    )
}

pub fn recon(p: &ReconParams, seed: u64, r: &mut Report) -> Outcome {
    let obj = generate_object(p.object, p.n, seed)?;
    let pair = tilt_pair(p.tilts);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let noise = if p.noise_sigma > 0.0 {
        PixelNoise::BoundedGaussian { sigma: p.noise_sigma }
    } else {
        PixelNoise::None
    };
    let y1 = noise.perturb(&project(&obj, &pair.p1), &mut rng);
    let y2 = noise.perturb(&project(&obj, &pair.p2), &mut rng);
    let sol = solve_two_projection_points(&y1, &y2, &pair, Matching::Given)?;
    let errors: Vec<f64> = sol
        .object
        .points()
        .iter()
        .zip(obj.points())
        .map(|(a, b)| (a - b).norm())
        .collect();
    let max_error = errors.iter().copied().fold(0.0, f64::max);
    let bound = p.noise_sigma * std::f64::consts::SQRT_2 / sol.rank.sigma_min;
    r.metric("points", obj.len() as f64);
    r.metric("rank", sol.rank.rank as f64);
    r.metric("sigma_min", sol.rank.sigma_min);
    r.metric("condition", sol.rank.condition());
    r.metric("max_error", max_error);
    r.metric("error_bound", bound);
    r.metric("hausdorff_error", hausdorff(sol.object.points(), obj.points()));
    r.series("point_error", errors);
    r.verdict("within_error_bound", max_error <= bound.max(1e-9));
    if let Some(pp) = &p.pipeline {
        pipeline(pp, &pair, r)?;
    }
    Ok(())
}

/// Affine image data `u(p) = b + L p`; every frame vector is then affine and
/// its flow is a matrix exponential, which serves as ground truth.
const SCENE_B: [f64; 3] = [0.7, -0.4, 1.1];
const SCENE_L: [f64; 9] = [0.1, -0.05, 0.02, 0.03, 0.08, -0.04, -0.02, 0.05, 0.06];

fn pipeline(pp: &PipelineParams, pair: &ProjectionPair, r: &mut Report) -> Outcome {
    let b = Vector3::from_column_slice(&SCENE_B);
    let l = Matrix3::from_row_slice(&SCENE_L);
    let chart = Chart::cube(3, 0.0, 1.0, pp.resolution)?;
    let h = chart.spacing(0);
    let (m1, m2) = (*pair.p1.matrix(), *pair.p2.matrix());
    let rhs = move |x: &Vector3<f64>| {
        let u = b + l * x;
        (m1 * u, m2 * u)
    };
    let frame = build_frame(pair, chart, rhs, DEFAULT_THETAS, DEFAULT_CONDITION_BOUND)?;
    let defect = frame.involutivity_defect();
    r.metric("grid_h", h);
    r.metric("frame_condition", frame.condition());
    r.metric("involutivity_defect", defect);

    let p_star = Vector3::new(0.3, 0.35, 0.3);
    let z1 = m1 * p_star;
    let duality = DualityMap::new(Matrix2::identity(), m2 * p_star - z1)?;
    let located = ProjectionPair::new(pair.p1.clone(), pair.p2.clone(), duality);
    let mu = |x: &Vector3<f64>| (Vector2::new(x.x + 2.0 * x.z, x.y), Vector2::new(x.z - x.y, 3.0 * x.x));
    let (c1, c2) = mu(&p_star);
    let ip = find_initial_point(&located, &z1, &c1, &c2, mu, &InitialPointOptions::default())?;
    r.metric("initial_point_error", (ip.p0 - p_star).norm());

    let param_box = [(0.0, pp.flow_length); 3];
    let out = integrate_flows(&frame, &ip.p0, param_box, pp.steps, &FlowOptions::default())?;
    r.verdict("flows_truncated", out.truncated);
    let recovered = out.object.map(|o| o.points().to_vec()).unwrap_or_default();

    // exact flows of v_k = G_k (b + L p), G_k = A^+ S_k A
    let a = pair.stacked();
    let a_pinv = pinv(&a);
    let rot = |k: usize| {
        let mut s = DMatrix::<f64>::identity(4, 4);
        match k {
            1 => s.view_mut((0, 0), (2, 2)).copy_from(&rotation2(DEFAULT_THETAS.0)),
            2 => s.view_mut((2, 2), (2, 2)).copy_from(&rotation2(DEFAULT_THETAS.1)),
            _ => {}
        }
        s
    };
    let gens: Vec<Matrix4<f64>> = (0..3)
        .map(|k| {
            let g = &a_pinv * rot(k) * &a;
            let g = Matrix3::from_iterator(g.iter().copied());
            let mut m = Matrix4::zeros();
            m.fixed_view_mut::<3, 3>(0, 0).copy_from(&(g * l));
            m.fixed_view_mut::<3, 1>(0, 3).copy_from(&(g * b));
            m
        })
        .collect();
    let n = pp.steps + 1;
    let dt = pp.flow_length / pp.steps as f64;
    let mut truth = Vec::with_capacity(n * n * n);
    for i1 in 0..n {
        for i2 in 0..n {
            for i3 in 0..n {
                let g = (gens[2] * (i3 as f64 * dt)).exp() * (gens[1] * (i2 as f64 * dt)).exp() * (gens[0] * (i1 as f64 * dt)).exp();
                truth.push((g * Vector4::new(p_star.x, p_star.y, p_star.z, 1.0)).xyz());
            }
        }
    }
    let dist = hausdorff(&recovered, &truth);
    r.metric("pipeline_hausdorff", dist);
    r.metric("pipeline_points", recovered.len() as f64);
    r.verdict("pipeline_within_5h", dist <= 5.0 * h);
    r.verdict("involutive", defect <= 1e-4);
    Ok(())
}

fn draw(n: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..=scale)).collect()
}

pub fn holonomy(p: &HolonomyParams, seed: u64, r: &mut Report) -> Outcome {
    let chart = Chart::cube(2, p.lo, p.hi, p.resolution)?;
    let coeffs = match &p.coefficients {
        Some(c) => c.clone(),
        None => draw(generator_arity(p.generator, 2, p.k), p.scale, &mut ChaCha8Rng::seed_from_u64(seed)),
    };
    let (field, _) = build_field(&chart, p.k, p.generator, &coeffs)?;
    let corner = p.corner.to_vec();
    let sides = (p.sides[0], p.sides[1]);
    let hol = holonomy_loop(&field, &corner, (0, 1), sides, p.steps_per_unit)?;
    let curv = field.curvature(0, 1)?;
    let integral = curvature_integral(&curv, &corner, (0, 1), sides);
    let predicted = expm(&(-&integral));
    r.metric("holonomy_deviation", (&hol - DMatrix::identity(p.k, p.k)).norm());
    r.metric("curvature_max", curv.max_norm_interior());
    r.metric("curvature_integral_norm", integral.norm());
    let full = stokes_residual(&field, &corner, (0, 1), sides, p.steps_per_unit)?;
    let half = stokes_residual(&field, &corner, (0, 1), (sides.0 * 0.5, sides.1), p.steps_per_unit)?;
    r.metric("stokes_residual", full);
    r.metric("stokes_residual_half", half);
    r.metric("stokes_ratio", if full > 0.0 { half / full } else { f64::NAN });
    r.series("holonomy", hol.transpose().iter().copied().collect());
    r.series("exp_minus_curvature_integral", predicted.transpose().iter().copied().collect());
    r.verdict("flat", curv.max_norm_interior() <= 1e-10);
    Ok(())
}

pub fn algebra_check(p: &AlgebraParams, seed: u64, r: &mut Report) -> Outcome {
    let chart = Chart::cube(2, -1.0, 1.0, p.resolution)?;
    let (f1, f2) = match p.pairing {
        Pairing::Flat => (ConnectionField::flat(chart.clone(), p.k), ConnectionField::flat(chart.clone(), p.k)),
        Pairing::DualPair | Pairing::Mismatched => {
            let coeffs = draw(generator_arity(Generator::DualPair, 2, p.k), p.scale, &mut ChaCha8Rng::seed_from_u64(seed));
            let (a, dual) = build_field(&chart, p.k, Generator::DualPair, &coeffs)?;
            let b = match p.pairing {
                Pairing::DualPair => dual.expect("dual pair generator returns a partner"),
                _ => a.clone(),
            };
            (a, b)
        }
    };
    let f2 = if p.defect > 0.0 {
        let mut e = DMatrix::zeros(p.k, p.k);
        e[(0, p.k - 1)] = p.defect;
        ConnectionField::from_fn(chart.clone(), p.k, |axis, x| {
            let w = f2.omega_at(axis, x);
            if axis == 1 { w + &e * x[0] } else { w }
        })?
    } else {
        f2
    };
    let ctx = StarContext::new(f1, f2, p.base_point.to_vec(), p.steps_per_unit)?;
    let torsion_free = AffineField::constant(chart, &[0.0; 8])?;
    let verdict = criterion_verdict(&ctx, &torsion_free, &torsion_free, p.tolerance)?;
    r.metric("curvature_duality_defect", verdict.curvature_duality_defect);
    r.metric("torsion_norm", verdict.torsion_norm1.max(verdict.torsion_norm2));
    r.verdict("associative", verdict.associative);

    let oct = moufang_table_residual(&LoopTable::octonion_units());
    let groups = LoopTable::groups_up_to_8()
        .iter()
        .map(|(_, g)| moufang_table_residual(g))
        .fold(0.0, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latin = (0..64)
        .map(|_| moufang_table_residual(&LoopTable::random_latin(5, &mut rng)))
        .find(|&x| x > 0.0)
        .unwrap_or(0.0);
    r.metric("moufang_octonion", oct);
    r.metric("moufang_groups_max", groups);
    r.metric("moufang_latin5", latin);
    r.verdict("moufang_octonion_zero", oct == 0.0);
    r.verdict("moufang_groups_zero", groups == 0.0);
    r.verdict("moufang_latin_detected", latin > 0.0);

    let sweep = associator_sweep(&ctx, p.triples, seed)?;
    let max_disc = sweep.path_discrepancies.iter().copied().fold(0.0, f64::max);
    r.metric("median_associator", sweep.median_associator);
    r.metric("max_associator", sweep.max_associator);
    r.metric("max_path_discrepancy", max_disc);
    r.verdict("associator_within_tolerance", sweep.max_associator <= p.tolerance);
    r.series("associator_norm", sweep.associator_norms);
    r.series("moufang_residual", sweep.moufang_residuals);
    r.series("path_discrepancy", sweep.path_discrepancies);
    Ok(())
}

pub fn toric(p: &ToricParams, seed: u64, r: &mut Report) -> Outcome {
    let group = parse_group_spec(&p.group)?;
    let basis = group.invariant_basis();
    let closed_form = basis.iter().fold(Matrix3::zeros(), |acc, b| acc + b * b.transpose());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut inv, mut idem, mut agree) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..64 {
        let v = Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0));
        let avg = group_average(&group, &v);
        for g in group.elements() {
            inv = inv.max((g * avg - avg).norm());
        }
        idem = idem.max((group_average(&group, &avg) - avg).norm());
        agree = agree.max((avg - closed_form * v).norm());
    }
    r.metric("group_order", group.order() as f64);
    r.metric("closure_defect", group.closure_defect());
    r.metric("invariance_defect", inv);
    r.metric("idempotence_defect", idem);
    r.metric("projector_agreement", agree);
    r.metric("invariant_dim", basis.len() as f64);

    // beads on the invariant subspace, seen through two tilted projections
    let truth: Vec<Vector3<f64>> = (0..p.beads)
        .map(|i| {
            let t = if p.beads > 1 { -1.0 + 2.0 * i as f64 / (p.beads - 1) as f64 } else { 0.0 };
            basis.first().map(|b| b * t).unwrap_or_else(Vector3::zeros)
        })
        .collect();
    let phantom = PointObject::uniform("phantom", truth.clone())?;
    let pair = tilt_pair(p.tilts);
    let projections = vec![pair.p1.clone(), pair.p2.clone()];
    let clean: Vec<Vec<Vector2<f64>>> = projections.iter().map(|m| project(&phantom, m)).collect();
    let noise = Normal::new(0.0, p.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let rms = |pts: &[Vector3<f64>]| {
        (pts.iter().zip(&truth).map(|(a, b)| (a - b).norm_squared()).sum::<f64>() / truth.len() as f64).sqrt()
    };
    let (mut err_l, mut err_0) = (Vec::new(), Vec::new());
    let mut gap = f64::NAN;
    for d in 0..p.draws {
        let images: Vec<Vec<Vector2<f64>>> = clean
            .iter()
            .map(|im| {
                im.iter()
                    .map(|y| {
                        if p.noise_sigma > 0.0 {
                            y + Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng))
                        } else {
                            *y
                        }
                    })
                    .collect()
            })
            .collect();
        let prob = |lambda: f64| EquivariantProblem {
            projections: projections.clone(),
            images: images.clone(),
            lambda,
            group: group.clone(),
        };
        err_l.push(rms(&toric::solve_equivariant(&prob(p.lambda))?.points));
        err_0.push(rms(&toric::solve_equivariant(&prob(0.0))?.points));
        if d == 0 {
            let big = toric::solve_equivariant(&prob(p.constrained_lambda))?;
            let con = toric::solve_constrained(&prob(p.constrained_lambda))?;
            gap = big
                .points
                .iter()
                .zip(&con.points)
                .map(|(a, b)| (a - b).norm())
                .fold(0.0, f64::max);
        }
    }
    let wins = err_l.iter().zip(&err_0).filter(|(a, b)| a <= b).count();
    r.metric("constrained_gap", gap);
    r.metric("denoise_wins", wins as f64);
    r.metric("denoise_win_fraction", wins as f64 / p.draws as f64);
    r.metric("mean_error_lambda", err_l.iter().sum::<f64>() / p.draws as f64);
    r.metric("mean_error_zero", err_0.iter().sum::<f64>() / p.draws as f64);
    r.series("error_lambda", err_l);
    r.series("error_zero", err_0);
    r.verdict("invariant", inv <= 1e-12);
    r.verdict("idempotent", idem <= 1e-12);
    r.verdict("projector_agrees", agree <= 1e-12);
    r.verdict("constrained_limit", gap <= 1e-6);
    r.verdict("denoising_benefit", wins * 10 >= p.draws * 9);
    Ok(())
}

fn load_dataset(src: &DataSource, seed: u64) -> Result<Dataset, Error> {
    match src {
        DataSource::Generator { kind, n, d, noise } => imputer::make_dataset(*kind, *n, *d, *noise, seed),
        DataSource::File { path } => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::InvalidArgument(format!("cannot read dataset {path}: {e}")))?;
            Ok(serde_json::from_str(&text)?)
        }
    }
}

pub fn impute(p: &ImputeParams, seed: u64, r: &mut Report) -> Outcome {
    let data = load_dataset(&p.data, seed)?;
    let mask = Mask::parse(&p.mask)?;
    if mask.dim() != data.dim() {
        return Err(Error::InvalidArgument(format!(
            "mask has {} bits but samples have {} coordinates",
            mask.dim(),
            data.dim()
        )));
    }
    let Some(truth) = data.samples().get(p.sample_index).cloned() else {
        return Err(Error::InvalidArgument(format!("sample_index {} is out of range", p.sample_index)));
    };
    let opts = FitOptions {
        lambda: p.lambda,
        iterations: p.iterations,
        seed,
        degree: p.degree,
        cells: p.cells,
    };
    let conn = imputer::fit_connection(&data, &mask, &opts)?;
    let rep = &conn.fit_report;
    r.metric("baseline_loss", rep.baseline_loss);
    r.metric("recon_loss", rep.recon_loss);
    r.metric("curvature_norm", rep.curvature_norm);
    r.metric("fit_iterations", rep.iterations as f64);
    r.series("loss_trace", rep.loss_trace.clone());

    let mut x_obs = truth.clone();
    for j in mask.missing() {
        x_obs[j] = f64::NAN;
    }
    let outs = imputer::impute(&conn, &data, &x_obs, p.paths, seed)?;
    let div = imputer::diversity_report(&outs, &mask)?;
    let missing = mask.missing();
    let err = outs
        .iter()
        .map(|o| missing.iter().map(|&j| (o[j] - truth[j]).powi(2)).sum::<f64>().sqrt())
        .sum::<f64>()
        / outs.len() as f64;
    r.metric("spread", div.spread);
    r.metric("mean_imputation_error", err);
    for &j in &missing {
        r.series(&format!("imputed_x{j}"), outs.iter().map(|o| o[j]).collect());
    }
    let observed_exact = outs
        .iter()
        .all(|o| mask.observed().iter().all(|&j| o[j].to_bits() == truth[j].to_bits()));
    r.verdict("observed_exact", observed_exact);
    r.verdict("loss_not_above_baseline", rep.recon_loss <= rep.baseline_loss);
    Ok(())
}

/// Rank of the stacked slab-indicator rows when every particle falls in one
/// slab per angle. With `m` partitions this is the sum of block counts minus
/// `(m - 1)` times the number of blocks of their join.
fn partition_rank(labels: &[Vec<i64>]) -> usize {
    let Some(n) = labels.first().map(Vec::len) else {
        return 0;
    };
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while parent[r] != r {
            r = parent[r];
        }
        parent[x] = r;
        r
    }
    let mut blocks = 0;
    for lab in labels {
        let mut distinct = lab.clone();
        distinct.sort_unstable();
        distinct.dedup();
        blocks += distinct.len();
        for i in 0..n {
            for j in i + 1..n {
                if lab[i] == lab[j] {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    parent[a] = b;
                }
            }
        }
    }
    let joins = (0..n).filter(|&i| find(&mut parent, i) == i).count();
    blocks - (labels.len() - 1) * joins
}

pub fn radon(p: &RadonParams, seed: u64, r: &mut Report) -> Outcome {
    let positions: Vec<Vector3<f64>> = (0..p.particles).map(|k| Vector3::new(k as f64 * p.spacing, 0.0, 0.0)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let masses: Vec<f64> = (0..p.particles).map(|_| rng.random_range(0.5..1.5)).collect();
    let obj = PointObject::new("particles_on_a_line", positions.clone(), masses.clone())?;
    let w = p.slab_width;
    let dists: Vec<f64> = p
        .angles
        .iter()
        .flat_map(|&a| positions.iter().map(move |x| folirec_core::scene::radon_normal(a).dot(x)))
        .collect();
    let lo = (dists.iter().copied().fold(f64::INFINITY, f64::min) / w).floor() as i64 - 1;
    let hi = (dists.iter().copied().fold(f64::NEG_INFINITY, f64::max) / w).ceil() as i64 + 1;
    let offsets: Vec<f64> = (lo..=hi).map(|j| j as f64 * w).collect();
    // slab j holds signed distances in [(j - 1/2) w, (j + 1/2) w)
    let labels = |angles: &[f64]| -> Vec<Vec<i64>> {
        angles
            .iter()
            .map(|&a| {
                let n = folirec_core::scene::radon_normal(a);
                positions.iter().map(|x| (n.dot(x) / w + 0.5).floor() as i64).collect()
            })
            .collect()
    };

    let system = radon_system(&positions, &p.angles, &offsets, w)?;
    let rank = RankReport::of(&system).rank;
    let analytic = partition_rank(&labels(&p.angles));
    r.metric("particles", p.particles as f64);
    r.metric("rank", rank as f64);
    r.metric("analytic_rank", analytic as f64);
    r.verdict("rank_matches_analytic", rank == analytic);
    r.verdict("full_rank", rank == p.particles);

    let single = radon_system(&positions, &p.angles[..1], &offsets, w)?;
    let single_rank = RankReport::of(&single).rank;
    r.metric("rank_single", single_rank as f64);
    r.metric("analytic_rank_single", partition_rank(&labels(&p.angles[..1])) as f64);
    let single_samples = radon_transform(&obj, &p.angles[..1], &offsets, w)?;
    let single_ill_posed = matches!(
        folirec_core::scene::solve_radon_weights(&single, &single_samples),
        Err(Error::IllPosed { .. })
    );
    r.verdict("single_projection_ill_posed", single_ill_posed);

    let samples = radon_transform(&obj, &p.angles, &offsets, w)?;
    r.series("samples", samples.iter().map(|s| s.value).collect());
    let weights = folirec_core::scene::solve_radon_weights(&system, &samples)?;
    let err = weights.iter().zip(&masses).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    r.metric("weight_error", err);
    r.series("recovered_mass", weights);
    r.series("true_mass", masses);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_rank_examples() {
        // pairs {0},{1,2},{3} and {0,1},{2,3}: chained, full rank
        assert_eq!(partition_rank(&[vec![0, 1, 1, 2], vec![0, 0, 1, 1]]), 4);
        // identical partitions add nothing
        assert_eq!(partition_rank(&[vec![0, 0, 1, 1], vec![5, 5, 7, 7]]), 2);
        assert_eq!(partition_rank(&[vec![0, 1, 2]]), 3);
    }
}
