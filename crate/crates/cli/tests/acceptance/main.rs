//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

mod baseline;

use planeslam::evaluation::{ate, reconstruction_rmse, rpe, Trajectory};
use planeslam::features::{associate_planes, MatchSet, PlaneMatch, PlaneObservation, PointMatch};
use planeslam::geometry::{transform_plane, CameraIntrinsics};
use planeslam::manhattan::{mean_shift_rotation, DirectionSample, DirectionSource, MeanShiftParams};
use planeslam::mapping::LandmarkId;
use planeslam::meshing::{greedy_triangulate, KdTree, MeshParams, PlanarMesh};
use planeslam::nalgebra::{
    DMatrix, DVector, Matrix3, Matrix4, Rotation3, RowVector3, SymmetricEigen, Unit, Vector2, Vector3, Vector4,
};
use planeslam::sensor::{generate_synthetic_scene, SceneSpec, SyntheticScene};
use planeslam::tracking::{
    estimate_translation, line_residual, parallel_residual, perpendicular_residual, plane_residual, point_residual,
    TrackerParams,
};
use planeslam::{Config, PlaneHessian, Pose, Slam};
use planeslam_cli::{cmd_run, RunInput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;
use std::time::{Duration, Instant};

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(name: &'static str, pass: bool, detail: String) -> Outcome {
    Outcome { name, pass, detail }
}

/// Angle of a rotation matrix, robust near 0 and π.
fn angle_of(r: &Matrix3<f64>) -> f64 {
    let s = (r - r.transpose()).norm() / (2.0 * 2f64.sqrt());
    s.atan2((r.trace() - 1.0) / 2.0)
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    let q = Vector4::from_fn(|_, _| rng.sample::<f64, _>(rand_distr::StandardNormal)).normalize();
    planeslam::nalgebra::UnitQuaternion::from_quaternion(planeslam::nalgebra::Quaternion::from(q))
        .to_rotation_matrix()
        .into_inner()
}

fn random_pose(rng: &mut ChaCha8Rng, reach: f64) -> Pose {
    let t = Vector3::from_fn(|_, _| rng.random_range(-reach..reach));
    Pose::new(random_rotation(rng), t).unwrap()
}

fn axis_angle(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle).into_inner()
}

/// Polar factor by SVD, determinant forced to +1.
fn procrustes(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * v_t
}

// ---------------------------------------------------------------------------
// Synthetic sequences

struct SlamRun {
    scene: SyntheticScene,
    slam: Slam,
    estimate: Trajectory,
    elapsed: Duration,
}

fn box_room(noisy: bool) -> SceneSpec {
    let mut spec = SceneSpec::default();
    if noisy {
        spec.depth_noise = 0.005;
        spec.pixel_noise = 0.5;
    }
    spec
}

fn run_slam(spec: &SceneSpec, config: &Config) -> SlamRun {
    let start = Instant::now();
    let scene = generate_synthetic_scene(spec).expect("scene renders");
    let mut slam = Slam::new(config);
    for frame in &scene.frames {
        slam.process(frame).expect("tracking initializes");
    }
    let estimate = slam.trajectory().expect("trajectory");
    SlamRun {
        elapsed: start.elapsed(),
        scene,
        slam,
        estimate,
    }
}

/// Rotation error of every frame relative to the first one, in degrees.
fn relative_rotation_errors(estimate: &[Pose], truth: &[Pose]) -> Vec<f64> {
    let (e0, g0) = (estimate[0].rotation(), truth[0].rotation());
    estimate
        .iter()
        .zip(truth)
        .map(|(e, g)| {
            let rel_e = e.rotation() * e0.transpose();
            let rel_g = g.rotation() * g0.transpose();
            angle_of(&(rel_e.transpose() * rel_g)).to_degrees()
        })
        .collect()
}

/// Two-sided 97.5% quantile of Student's t with `nu` degrees of freedom
/// (Cornish-Fisher expansion around the normal quantile).
fn t_quantile_975(nu: f64) -> f64 {
    let z: f64 = 1.959_963_984_540_054;
    let (z3, z5, z7) = (z.powi(3), z.powi(5), z.powi(7));
    z + (z3 + z) / (4.0 * nu)
        + (5.0 * z5 + 16.0 * z3 + 3.0 * z) / (96.0 * nu * nu)
        + (3.0 * z7 + 19.0 * z5 + 17.0 * z3 - 15.0 * z) / (384.0 * nu.powi(3))
}

/// Least-squares slope of `y` against its index and its 95% interval.
fn slope_interval(points: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = points.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let se = (sse / (n - 2.0) / sxx).sqrt();
    let half = t_quantile_975(n - 2.0) * se;
    (slope, slope - half, slope + half)
}

/// `(frame index, error)` pairs, skipping the reference frame.
fn indexed(errors: &[f64]) -> Vec<(f64, f64)> {
    errors.iter().enumerate().skip(1).map(|(i, e)| (i as f64, *e)).collect()
}

fn end_to_end(clean: &SlamRun, noisy: &SlamRun) -> Outcome {
    let gt = clean.scene.ground_truth();
    let a = ate(&clean.estimate, &gt, 1e-3).unwrap();
    let r = rpe(&clean.estimate, &gt, 1, 1e-3).unwrap();
    let an = ate(&noisy.estimate, &noisy.scene.ground_truth(), 1e-3).unwrap();
    let complete = clean.estimate.len() == 60 && noisy.estimate.len() == 60;
    let slowest = clean.elapsed.max(noisy.elapsed);
    let pass = complete && a.rmse < 1e-3 && r.rot_rmse_deg < 0.05 && an.rmse < 0.02 && slowest.as_secs_f64() < 60.0;
    outcome(
        "synthetic end-to-end",
        pass,
        format!(
            "clean ATE {:.3} mm (< 1), RPE rot {:.4} deg/frame (< 0.05); noisy ATE {:.2} mm (< 20); slowest run {:.1} s (< 60)",
            a.rmse * 1e3,
            r.rot_rmse_deg,
            an.rmse * 1e3,
            slowest.as_secs_f64()
        ),
    )
}

/// Regresses the error of the rotation delivered by the Manhattan stage,
/// before map refinement. The refined output is reported alongside.
fn drift_free(noisy: &SlamRun) -> Outcome {
    let truth = &noisy.scene.poses;
    let logs = noisy.slam.logs();
    let start = logs
        .iter()
        .position(|l| l.manhattan_rotation.is_some())
        .expect("initialized run");
    let g0 = truth[start].rotation();
    let manhattan: Vec<(f64, f64)> = logs
        .iter()
        .skip(start + 1)
        .filter_map(|l| {
            let r = l.manhattan_rotation?;
            let rel_g = truth[l.index].rotation() * g0.transpose();
            Some((l.index as f64, angle_of(&(r.transpose() * rel_g)).to_degrees()))
        })
        .collect();
    let (s, lo, hi) = slope_interval(&manhattan);
    let refined = slope_interval(&indexed(&relative_rotation_errors(
        &noisy.estimate.poses(),
        &truth[start..],
    )));
    let odometry = baseline::frame_to_frame(&noisy.scene.frames, &Config::default());
    let (bs, blo, bhi) = slope_interval(&indexed(&relative_rotation_errors(&odometry, truth)));
    let pass = manhattan.len() >= 50 && lo <= 0.0 && 0.0 <= hi && bs > 0.0;
    outcome(
        "drift-free rotation",
        pass,
        format!(
            "Manhattan-stage slope {s:.2e} deg/frame over {} frames, 95% CI [{lo:.2e}, {hi:.2e}] (contains 0); \
             frame-to-frame slope {bs:.2e}, CI [{blo:.2e}, {bhi:.2e}] (> 0); refined output slope {:.2e}",
            manhattan.len(),
            refined.0
        ),
    )
}

// ---------------------------------------------------------------------------
// Mean shift

fn mean_shift_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let params = MeanShiftParams::default();
    let noise = Normal::new(0.0, 5f64.to_radians()).unwrap();
    let trials = 200;
    let mut within = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let r = random_rotation(&mut rng);
        let mut samples = Vec::with_capacity(300);
        let mut scatter = Matrix3::zeros();
        for i in 0..300 {
            let k = i % 3;
            let axis: Vector3<f64> = r.column(k).into();
            // Rotation about a random in-tangent axis, Gaussian per tangent component.
            let w: Vector3<f64> =
                r.column((k + 1) % 3) * noise.sample(&mut rng) + r.column((k + 2) % 3) * noise.sample(&mut rng);
            let direction = axis_angle(&w, w.norm()) * axis;
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            samples.push(DirectionSample::new(direction * sign, DirectionSource::PlaneNormal, 1.0).unwrap());
            // Oracle: every sample assigned to its true axis, sign aligned.
            let mut e = Vector3::zeros();
            e[k] = 1.0;
            scatter += direction * e.transpose();
        }
        let oracle = procrustes(&scatter);
        let tilt = Vector3::from_fn(|_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        let seed = axis_angle(&tilt, rng.random_range(0.0..15f64.to_radians())) * r;
        let Ok(estimate) = mean_shift_rotation(&samples, &seed, &params) else {
            continue;
        };
        let error = angle_of(&(estimate.rotation.transpose() * oracle)).to_degrees();
        worst = worst.max(error);
        if error < 1.0 {
            within += 1;
        }
    }
    let rate = within as f64 / trials as f64;
    outcome(
        "mean-shift oracle",
        rate >= 0.99,
        format!(
            "{within}/{trials} within 1 deg of the Procrustes oracle ({:.1}% >= 99%), worst {worst:.3} deg",
            rate * 100.0
        ),
    )
}

// ---------------------------------------------------------------------------
// Translation solver

fn camera() -> CameraIntrinsics {
    CameraIntrinsics::new(250.0, 250.0, 160.0, 120.0, 1.0, 320, 240).unwrap()
}

fn point_set(truth: &Pose, n: usize, rng: &mut ChaCha8Rng) -> Vec<PointMatch> {
    let k = camera();
    (0..n)
        .map(|i| {
            let pc = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-0.8..0.8),
                rng.random_range(1.5..4.0),
            );
            PointMatch {
                feature: i,
                landmark: LandmarkId(i as u64),
                pixel: k.project(&pc).unwrap(),
                position: truth.inverse().transform_point(&pc),
                weight: 1.0,
            }
        })
        .collect()
}

fn plane_set(truth: &Pose, rng: &mut ChaCha8Rng) -> Vec<PlaneMatch> {
    // Three independent directions make the translation observable.
    let base = random_rotation(rng);
    (0..3)
        .map(|i| {
            let tilt = axis_angle(&Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)), 0.2);
            let map = PlaneHessian::new(tilt * base.column(i), -rng.random_range(1.0..4.0)).unwrap();
            PlaneMatch {
                observation: i,
                landmark: LandmarkId(100 + i as u64),
                observed: transform_plane(&map, truth).canonical(),
                map_plane: map,
                weight: Vector3::repeat(1e4),
            }
        })
        .collect()
}

/// Linear least-squares translation: projection rows `u z = fx x + cx z`
/// rearranged in `t`, and plane rows `(R n)·t = d_map - s d_obs`.
fn linear_translation(rotation: &Matrix3<f64>, points: &[PointMatch], planes: &[PlaneMatch]) -> Vector3<f64> {
    let k = camera();
    let rows = 2 * points.len() + planes.len();
    let mut a = DMatrix::zeros(rows, 3);
    let mut b = DVector::zeros(rows);
    for (i, m) in points.iter().enumerate() {
        let rp = rotation * m.position;
        let (u, v) = (m.pixel.x - k.cx, m.pixel.y - k.cy);
        a.set_row(2 * i, &RowVector3::new(k.fx, 0.0, -u));
        b[2 * i] = u * rp.z - k.fx * rp.x;
        a.set_row(2 * i + 1, &RowVector3::new(0.0, k.fy, -v));
        b[2 * i + 1] = v * rp.z - k.fy * rp.y;
    }
    for (i, m) in planes.iter().enumerate() {
        let n = rotation * m.map_plane.normal;
        let s = n.dot(&m.observed.normal).signum();
        let row = 2 * points.len() + i;
        a.set_row(row, &n.transpose());
        b[row] = m.map_plane.d - s * m.observed.d;
    }
    let x = a.svd(true, true).solve(&b, 1e-12).unwrap();
    Vector3::new(x[0], x[1], x[2])
}

fn translation_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let params = TrackerParams::default();
    let k = camera();
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    for _ in 0..20 {
        let truth = Pose::new(
            axis_angle(&Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)), 0.3),
            Vector3::from_fn(|_, _| rng.random_range(-0.3..0.3)),
        )
        .unwrap();
        let points = point_set(&truth, 20, &mut rng);
        let planes = plane_set(&truth, &mut rng);
        let start = truth.with_translation(Vector3::zeros());
        for (name, p, q) in [
            ("points", points.clone(), vec![]),
            ("planes", vec![], planes.clone()),
            ("mixed", points[..4].to_vec(), planes[..2].to_vec()),
        ] {
            let set = MatchSet {
                points: p.clone(),
                planes: q.clone(),
                ..MatchSet::default()
            };
            let oracle = linear_translation(truth.rotation(), &p, &q);
            let error = match estimate_translation(&set, &start, &k, &params) {
                Ok(e) if e.pose.rotation() == truth.rotation() => (e.pose.translation() - oracle).norm(),
                _ => f64::INFINITY,
            };
            let w = worst.entry(name).or_insert(0.0);
            *w = w.max(error);
        }
    }
    let mut points = point_set(
        &Pose::identity().with_translation(Vector3::new(0.1, -0.05, 0.02)),
        20,
        &mut rng,
    );
    points[4].pixel += Vector2::new(50.0, 0.0);
    let truth = Vector3::new(0.1, -0.05, 0.02);
    let set = MatchSet {
        points,
        ..MatchSet::default()
    };
    let outlier = estimate_translation(&set, &Pose::identity(), &k, &params)
        .map(|e| (e.pose.translation() - truth).norm())
        .unwrap_or(f64::INFINITY);
    let exact = worst.values().all(|&e| e < 1e-6);
    outcome(
        "translation oracle",
        exact && outlier < 1e-3,
        format!(
            "worst vs linear LS: points {:.1e} m, planes {:.1e} m, mixed {:.1e} m (< 1e-6); 50 px outlier {:.2e} m (< 1e-3)",
            worst["points"], worst["planes"], worst["mixed"], outlier
        ),
    )
}

// ---------------------------------------------------------------------------
// Jacobians

fn central_differences(pose: &Pose, f: impl Fn(&Pose) -> Vec<f64>) -> DMatrix<f64> {
    let h = 1e-6;
    let m = f(pose).len();
    let mut j = DMatrix::zeros(m, 6);
    for c in 0..6 {
        let mut step = [0.0; 6];
        step[c] = h;
        let dw = Vector3::new(step[0], step[1], step[2]);
        let dt = Vector3::new(step[3], step[4], step[5]);
        let (a, b) = (f(&pose.retract(&dw, &dt)), f(&pose.retract(&-dw, &-dt)));
        for r in 0..m {
            j[(r, c)] = (a[r] - b[r]) / (2.0 * h);
        }
    }
    j
}

fn relative_error(analytic: &[f64], numeric: &DMatrix<f64>) -> f64 {
    let analytic = DMatrix::from_column_slice(numeric.nrows(), 6, analytic);
    (analytic - numeric).norm() / numeric.norm().max(1e-8)
}

fn jacobian_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let k = CameraIntrinsics::new(250.0, 260.0, 160.0, 120.0, 1.0, 320, 240).unwrap();
    let mut worst = [0.0f64; 5];
    for _ in 0..100 {
        let pose = random_pose(&mut rng, 0.5);
        let pc = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(1.0..4.0),
        );
        let pw = pose.inverse().transform_point(&pc);
        let obs = Vector2::new(rng.random_range(0.0..320.0), rng.random_range(0.0..240.0));
        let (_, ja) = point_residual(&obs, &pw, &pose, &k).unwrap();
        let jn = central_differences(&pose, |p| {
            point_residual(&obs, &pw, p, &k).unwrap().0.as_slice().to_vec()
        });
        worst[0] = worst[0].max(relative_error(ja.as_slice(), &jn));

        let line = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let (_, ja) = line_residual(&line, &pw, &pose, &k).unwrap();
        let jn = central_differences(&pose, |p| vec![line_residual(&line, &pw, p, &k).unwrap().0]);
        worst[1] = worst[1].max(relative_error(ja.as_slice(), &jn));

        // Keep the plane normal away from the elevation singularity.
        let map_normal = loop {
            let n = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize();
            if (pose.rotation() * n).y.abs() < 0.95 && (pose.rotation() * n).z.abs() < 0.95 {
                break n;
            }
        };
        let map = PlaneHessian::new(map_normal, rng.random_range(-3.0..3.0)).unwrap();
        let seen = transform_plane(&map, &pose);
        let tweak = axis_angle(
            &Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)),
            rng.random_range(0.0..0.05),
        );
        let observed = PlaneHessian::new(tweak * seen.normal, seen.d + 0.05)
            .unwrap()
            .canonical();
        let (_, ja) = plane_residual(&observed, &map, &pose);
        let jn = central_differences(&pose, |p| plane_residual(&observed, &map, p).0.as_slice().to_vec());
        worst[2] = worst[2].max(relative_error(ja.as_slice(), &jn));

        let (_, ja) = parallel_residual(&observed.normal, &map_normal, &pose);
        let jn = central_differences(&pose, |p| {
            parallel_residual(&observed.normal, &map_normal, p)
                .0
                .as_slice()
                .to_vec()
        });
        worst[3] = worst[3].max(relative_error(ja.as_slice(), &jn));

        let perp = seen
            .normal
            .cross(&Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)))
            .normalize();
        let perp_obs = tweak * perp;
        let (_, ja) = perpendicular_residual(&perp_obs, &map_normal, &pose);
        let jn = central_differences(&pose, |p| vec![perpendicular_residual(&perp_obs, &map_normal, p).0]);
        worst[4] = worst[4].max(relative_error(ja.as_slice(), &jn));
    }
    outcome(
        "jacobian suite",
        worst.iter().all(|&e| e < 1e-5),
        format!(
            "worst relative error over 100 states: point {:.1e}, line {:.1e}, plane {:.1e}, parallel {:.1e}, perpendicular {:.1e} (< 1e-5)",
            worst[0], worst[1], worst[2], worst[3], worst[4]
        ),
    )
}

// ---------------------------------------------------------------------------
// Plane association

fn observation(normal: Vector3<f64>, centroid: Vector3<f64>) -> PlaneObservation {
    PlaneObservation {
        plane: PlaneHessian::from_point_normal(&centroid, &normal).unwrap().canonical(),
        inlier_pixels: Vec::new(),
        inlier_points: vec![centroid],
        centroid,
        landmark_id: None,
    }
}

fn plane_association() -> Outcome {
    let map = PlaneHessian::new(Vector3::z(), -2.0).unwrap();
    let tilted = |deg: f64| {
        observation(
            axis_angle(&Vector3::x(), deg.to_radians()) * Vector3::z(),
            Vector3::new(0.0, 0.0, 2.0),
        )
    };
    let offset = |d: f64| observation(Vector3::z(), Vector3::new(0.3, -0.2, 2.0 + d));
    let assoc = |obs: PlaneObservation, maps: &[PlaneHessian]| associate_planes(&[obs], maps, 10.0, 0.1)[0];
    let near = PlaneHessian::new(Vector3::z(), -2.03).unwrap();
    let far = PlaneHessian::new(Vector3::z(), -2.06).unwrap();
    let cases = [
        ("9.9 deg matches", assoc(tilted(9.9), &[map]) == Some(0)),
        ("10.1 deg rejected", assoc(tilted(10.1), &[map]).is_none()),
        ("0.099 m matches", assoc(offset(0.099), &[map]) == Some(0)),
        ("0.101 m rejected", assoc(offset(0.101), &[map]).is_none()),
        (
            "nearest wins",
            assoc(offset(0.0), &[far, near]) == Some(1) && assoc(offset(0.0), &[near, far]) == Some(0),
        ),
        (
            "flipped normal matches",
            assoc(observation(-Vector3::z(), Vector3::new(0.0, 0.0, 2.05)), &[map]) == Some(0),
        ),
    ];
    let failed: Vec<_> = cases.iter().filter(|c| !c.1).map(|c| c.0).collect();
    outcome(
        "plane association",
        failed.is_empty(),
        if failed.is_empty() {
            format!("{} boundary cases reproduced", cases.len())
        } else {
            format!("failed: {}", failed.join(", "))
        },
    )
}

// ---------------------------------------------------------------------------
// Meshing

fn edge_counts(mesh: &PlanarMesh) -> BTreeMap<(u32, u32), usize> {
    let mut edges = BTreeMap::new();
    for t in &mesh.triangles {
        for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
            *edges.entry((a.min(b), a.max(b))).or_insert(0) += 1;
        }
    }
    edges
}

/// Every triangle stays inside its instance's vertex block, and every vertex
/// is a support point of the plane landmark it is labeled with, projected
/// onto that plane.
fn instances_isolated(mesh: &PlanarMesh, slam: &Slam) -> bool {
    let projected: BTreeMap<u64, KdTree> = slam
        .map()
        .planes()
        .map(|(id, p)| {
            let on_plane: Vec<_> = p
                .cloud
                .iter()
                .map(|q| q - p.plane.normal * p.plane.signed_distance(q))
                .collect();
            (id.0, KdTree::build(&on_plane).unwrap())
        })
        .collect();
    let mut ends: Vec<(usize, usize)> = mesh.offsets.iter().skip(1).map(|o| (o.1, o.2)).collect();
    ends.push((mesh.vertices.len(), mesh.triangles.len()));
    mesh.offsets.iter().zip(ends).all(|(&(id, v0, t0), (v1, t1))| {
        let Some(tree) = projected.get(&id) else { return false };
        let vertices_ok = (v0..v1)
            .all(|v| mesh.instance_ids[v] == id && tree.nearest(&mesh.vertices[v]).is_some_and(|(_, d2)| d2 < 1e-18));
        let triangles_ok = mesh.triangles[t0..t1]
            .iter()
            .all(|t| t.iter().all(|&i| (v0..v1).contains(&(i as usize))));
        vertices_ok && triangles_ok
    })
}

fn meshing(clean: &SlamRun) -> Outcome {
    let params = MeshParams::default();
    let z = PlaneHessian::new(Vector3::z(), 0.0).unwrap();
    let square = [
        Vector3::zeros(),
        Vector3::x(),
        Vector3::new(1.0, 1.0, 0.0),
        Vector3::y(),
    ];
    let f = greedy_triangulate(&square, &z, &params).unwrap();
    let area: f64 = f
        .triangles
        .iter()
        .map(|t| {
            let [a, b, c] = t.map(|i| f.vertices[i as usize]);
            (b - a).cross(&(c - a)).norm() / 2.0
        })
        .sum();
    let square_ok = f.triangles.len() == 2 && (area - 1.0).abs() < 1e-9;

    let grid: Vec<_> = (0..10)
        .flat_map(|i| (0..10).map(move |j| Vector3::new(i as f64 * 0.1, j as f64 * 0.1, 0.0)))
        .collect();
    let grid_triangles = greedy_triangulate(&grid, &z, &params)
        .map(|f| f.triangles.len())
        .unwrap_or(0);

    let (mesh, _) = clean.slam.mesh(&Config::default());
    let isolated = instances_isolated(&mesh, &clean.slam);
    let max_per_edge = edge_counts(&mesh).into_values().max().unwrap_or(0);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cloud: Vec<_> = (0..2000)
        .map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)))
        .collect();
    let tree = KdTree::build(&cloud).unwrap();
    let kd_ok = (0..50).all(|_| {
        let q = Vector3::from_fn(|_, _| rng.random_range(-1.2..1.2));
        let mut brute: Vec<_> = cloud
            .iter()
            .enumerate()
            .map(|(i, p)| (i, (p - q).norm_squared()))
            .collect();
        brute.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        let within: Vec<_> = brute.iter().copied().filter(|x| x.1 <= 0.04).collect();
        tree.knn(&q, 10) == brute[..10] && tree.radius(&q, 0.2) == within
    });

    let pass = square_ok && grid_triangles == 162 && !mesh.is_empty() && isolated && max_per_edge <= 2 && kd_ok;
    outcome(
        "meshing",
        pass,
        format!(
            "unit square {} triangles, area {area:.12}; 10x10 grid {grid_triangles} triangles (162); box-room map {} triangles, \
             instances isolated: {isolated}, max triangles per edge {max_per_edge} (<= 2); kd-tree = brute force: {kd_ok}",
            f.triangles.len(),
            mesh.triangles.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// Metrics

fn pose_matrix(p: &Pose) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(p.rotation());
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(p.translation());
    m
}

/// Rigid alignment by Horn's unit-quaternion method.
fn horn(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> (Matrix3<f64>, Vector3<f64>) {
    let n = src.len() as f64;
    let (ms, md) = (
        src.iter().sum::<Vector3<f64>>() / n,
        dst.iter().sum::<Vector3<f64>>() / n,
    );
    let mut s = Matrix3::zeros();
    for (a, b) in src.iter().zip(dst) {
        s += (a - ms) * (b - md).transpose();
    }
    let (sxx, sxy, sxz) = (s[(0, 0)], s[(0, 1)], s[(0, 2)]);
    let (syx, syy, syz) = (s[(1, 0)], s[(1, 1)], s[(1, 2)]);
    let (szx, szy, szz) = (s[(2, 0)], s[(2, 1)], s[(2, 2)]);
    let nmat = Matrix4::new(
        sxx + syy + szz,
        syz - szy,
        szx - sxz,
        sxy - syx,
        syz - szy,
        sxx - syy - szz,
        sxy + syx,
        szx + sxz,
        szx - sxz,
        sxy + syx,
        -sxx + syy - szz,
        syz + szy,
        sxy - syx,
        szx + sxz,
        syz + szy,
        -sxx - syy + szz,
    );
    let eig = SymmetricEigen::new(nmat);
    let q = eig.eigenvectors.column(eig.eigenvalues.imax()).into_owned();
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let r = Matrix3::new(
        w * w + x * x - y * y - z * z,
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        w * w - x * x + y * y - z * z,
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        w * w - x * x - y * y + z * z,
    );
    (r, md - r * ms)
}

/// ATE RMSE, RPE translation and RPE rotation (degrees) over poses that
/// share timestamps, computed from 4x4 matrices.
fn brute_metrics(est: &[Pose], gt: &[Pose], interval: usize) -> (f64, f64, f64) {
    let centre = |p: &Pose| -> Vector3<f64> {
        let inv = pose_matrix(p).try_inverse().unwrap();
        Vector3::new(inv[(0, 3)], inv[(1, 3)], inv[(2, 3)])
    };
    let (src, dst): (Vec<_>, Vec<_>) = est.iter().zip(gt).map(|(e, g)| (centre(e), centre(g))).unzip();
    let (r, t) = horn(&src, &dst);
    let ate = (src
        .iter()
        .zip(&dst)
        .map(|(s, d)| (r * s + t - d).norm_squared())
        .sum::<f64>()
        / src.len() as f64)
        .sqrt();
    let (mut et, mut er) = (0.0, 0.0);
    let m = est.len() - interval;
    for i in 0..m {
        let rel = |p: &[Pose]| pose_matrix(&p[i]) * pose_matrix(&p[i + interval]).try_inverse().unwrap();
        let e = rel(gt).try_inverse().unwrap() * rel(est);
        et += Vector3::new(e[(0, 3)], e[(1, 3)], e[(2, 3)]).norm_squared();
        er += angle_of(&e.fixed_view::<3, 3>(0, 0).into_owned()).to_degrees().powi(2);
    }
    (ate, (et / m as f64).sqrt(), (er / m as f64).sqrt())
}

fn brute_reconstruction(pred: &[Vector3<f64>], model: &[Vector3<f64>]) -> f64 {
    let sum: f64 = pred
        .iter()
        .map(|p| {
            model
                .iter()
                .map(|q| (p - q).norm_squared())
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    (sum / pred.len() as f64).sqrt()
}

fn metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut oracle_gap: f64 = 0.0;
    for trial in 0..50 {
        let n = 3 + trial % 8;
        let gt: Vec<Pose> = (0..n).map(|_| random_pose(&mut rng, 2.0)).collect();
        let est: Vec<Pose> = gt
            .iter()
            .map(|p| {
                p.retract(
                    &Vector3::from_fn(|_, _| rng.random_range(-0.05..0.05)),
                    &Vector3::from_fn(|_, _| rng.random_range(-0.1..0.1)),
                )
            })
            .collect();
        let stamps: Vec<f64> = (0..n).map(|i| i as f64 * 0.1).collect();
        let traj = |p: &[Pose], dt: f64| {
            Trajectory::new(stamps.iter().map(|t| t + dt).zip(p.iter().copied()).collect()).unwrap()
        };
        let (e, g) = (traj(&est, 0.003), traj(&gt, 0.0));
        let interval = 1 + trial % 2;
        let (oa, ot, or) = brute_metrics(&est, &gt, interval);
        let a = ate(&e, &g, 0.01).unwrap().rmse;
        let r = rpe(&e, &g, interval, 0.01).unwrap();
        let pred: Vec<_> = (0..n)
            .map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let model: Vec<_> = (0..3 * n)
            .map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let rec = reconstruction_rmse(&pred, &model).unwrap();
        for gap in [
            a - oa,
            r.trans_rmse - ot,
            r.rot_rmse_deg - or,
            rec - brute_reconstruction(&pred, &model),
        ] {
            oracle_gap = oracle_gap.max(gap.abs());
        }
    }

    let gt: Vec<Pose> = (0..10).map(|_| random_pose(&mut rng, 2.0)).collect();
    let est: Vec<Pose> = gt
        .iter()
        .map(|p| {
            p.retract(
                &Vector3::from_fn(|_, _| rng.random_range(-0.05..0.05)),
                &Vector3::from_fn(|_, _| rng.random_range(-0.1..0.1)),
            )
        })
        .collect();
    let stamps: Vec<f64> = (0..10).map(|i| i as f64 * 0.1).collect();
    let make = |p: Vec<Pose>| Trajectory::new(stamps.iter().copied().zip(p).collect()).unwrap();
    let (e, g) = (make(est.clone()), make(gt));
    let model: Vec<_> = (0..40)
        .map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)))
        .collect();
    let pred: Vec<_> = (0..15)
        .map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)))
        .collect();
    let base_ate = ate(&e, &g, 0.01).unwrap().rmse;
    let base_rpe = rpe(&e, &g, 1, 0.01).unwrap();
    let base_rec = reconstruction_rmse(&pred, &model).unwrap();
    let mut invariance_gap: f64 = 0.0;
    for _ in 0..100 {
        // Re-express the estimate (and the clouds) in another world frame.
        let world = random_pose(&mut rng, 5.0);
        let moved = make(est.iter().map(|p| p.compose(&world.inverse())).collect());
        let a = ate(&moved, &g, 0.01).unwrap().rmse;
        let r = rpe(&moved, &g, 1, 0.01).unwrap();
        let shift = |c: &[Vector3<f64>]| c.iter().map(|p| world.transform_point(p)).collect::<Vec<_>>();
        let rec = reconstruction_rmse(&shift(&pred), &shift(&model)).unwrap();
        for gap in [
            a - base_ate,
            r.trans_rmse - base_rpe.trans_rmse,
            r.rot_rmse_deg - base_rpe.rot_rmse_deg,
            rec - base_rec,
        ] {
            invariance_gap = invariance_gap.max(gap.abs());
        }
    }
    outcome(
        "metrics",
        oracle_gap < 1e-12 && invariance_gap < 1e-9,
        format!("max gap to brute-force oracles {oracle_gap:.1e} (< 1e-12); max change under 100 rigid transforms {invariance_gap:.1e} (< 1e-9)"),
    )
}

// ---------------------------------------------------------------------------
// Determinism

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let spec = SceneSpec {
        frames: 20,
        depth_noise: 0.005,
        pixel_noise: 0.5,
        ..SceneSpec::default()
    };
    let scene = dir.path().join("scene.txt");
    std::fs::write(&scene, spec.to_kv_string()).unwrap();
    let config = Config::default();
    let run = |name: &str, threads: usize| {
        let out = dir.path().join(name);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let outputs = pool
            .install(|| cmd_run(RunInput::Scene(&scene), &out, &config))
            .expect("run succeeds");
        let read = |p: &std::path::Path| std::fs::read(p).unwrap();
        [
            read(&outputs.trajectory),
            read(&outputs.mesh),
            read(&outputs.mesh_obj),
            read(&outputs.map),
        ]
    };
    let first = run("a", 4);
    let second = run("b", 4);
    let single = run("c", 1);
    let same = first == second;
    let threads = first == single;
    outcome(
        "determinism",
        same && threads && !first[0].is_empty(),
        format!("repeat run byte-identical: {same}; 1 vs 4 threads byte-identical: {threads} (trajectory, mesh PLY/OBJ, map)"),
    )
}

fn main() {
    let clean = run_slam(&box_room(false), &Config::default());
    let noisy = run_slam(&box_room(true), &Config::default());
    let outcomes = [
        end_to_end(&clean, &noisy),
        drift_free(&noisy),
        mean_shift_oracle(),
        translation_oracle(),
        jacobian_suite(),
        plane_association(),
        meshing(&clean),
        metrics(),
        determinism(),
    ];
    for o in &outcomes {
        println!("{} {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.name, o.detail);
    }
    let failed = outcomes.iter().filter(|o| !o.pass).count();
    println!("{} passed, {failed} failed", outcomes.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
