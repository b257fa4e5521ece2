//! Shared fixtures for the integration tests.
#![allow(dead_code)]

pub mod labels;

use nalgebra::{DMatrix, DVector, Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rootskel::camera::{project, CameraView, Intrinsics, Pixel, Pose};
use rootskel::sba::{objective, residuals, AngleConstraint, Observation, SbaProblem, POSE_DOF};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Cameras on a ring of radius 4 around the origin, looking at it.
pub fn ring(n: usize, rng: &mut ChaCha8Rng) -> Vec<CameraView<f64>> {
    (0..n)
        .map(|i| {
            let az = i as f64 * 0.5 + rng.random_range(-0.05..0.05);
            let center = Point3::new(4.0 * az.cos(), rng.random_range(-0.5..0.5), 4.0 * az.sin());
            let pose = Pose::look_at(center, Point3::origin(), Vector3::y()).unwrap();
            let f = rng.random_range(400.0..700.0);
            CameraView::new(Intrinsics::new(f, f, 320.0, 240.0).unwrap(), pose, 640, 480).unwrap()
        })
        .collect()
}

pub fn cloud(m: usize, rng: &mut ChaCha8Rng) -> Vec<Point3<f64>> {
    (0..m)
        .map(|_| Point3::new(rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8)))
        .collect()
}

/// Observations of `points` through `truth`, each point kept in at least two
/// views, with optional pixel noise.
pub fn observe(truth: &[CameraView<f64>], points: &[Point3<f64>], noise_px: f64, rng: &mut ChaCha8Rng) -> Vec<Observation<f64>> {
    let mut obs = Vec::new();
    for (j, p) in points.iter().enumerate() {
        let keep_all = truth.len() <= 2;
        let mut kept = 0;
        for (i, cam) in truth.iter().enumerate() {
            let must = truth.len() - i <= 2 - kept.min(2);
            if !keep_all && !must && rng.random_bool(0.2) {
                continue;
            }
            let px = project(cam, p).unwrap();
            let du = rng.random_range(-noise_px..=noise_px);
            let dv = rng.random_range(-noise_px..=noise_px);
            obs.push(Observation { camera: i, point: j, pixel: Pixel::new(px.u + du, px.v + dv) });
            kept += 1;
        }
    }
    obs
}

/// Segment constraints over consecutive point pairs `(2k, 2k+1)`.
pub fn angle_constraints(points: &[Point3<f64>], rng: &mut ChaCha8Rng) -> Vec<AngleConstraint<f64>> {
    let segments = points.len() / 2;
    (0..segments.saturating_sub(1))
        .map(|k| AngleConstraint {
            a: [2 * k, 2 * k + 1],
            b: [2 * k + 2, 2 * k + 3],
            reference: rng.random_range(0.3..2.8),
        })
        .collect()
}

pub fn perturb_pose(view: &CameraView<f64>, rot: f64, trans: f64, rng: &mut ChaCha8Rng) -> CameraView<f64> {
    let unit = |rng: &mut ChaCha8Rng| {
        let v: Vector3<f64> = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        v / v.norm().max(1e-12)
    };
    let w = unit(rng) * rot;
    let t = unit(rng) * trans;
    CameraView { pose: view.pose.retract(&w, &t), ..*view }
}

/// A random problem with up to 5 cameras and 30 points; poses other than the
/// first are perturbed away from the cameras that produced the observations.
pub fn random_problem(seed: u64) -> SbaProblem<f64> {
    let mut r = rng(seed);
    let n = r.random_range(2..=5);
    let m = r.random_range(4..=30);
    let truth = ring(n, &mut r);
    let points = cloud(m, &mut r);
    let obs = observe(&truth, &points, 1.5, &mut r);
    let mut cams = truth.clone();
    for c in cams.iter_mut().skip(1) {
        *c = perturb_pose(c, 0.01, 0.03, &mut r);
    }
    let start: Vec<Point3<f64>> = points.iter().map(|p| p + Vector3::new(r.random_range(-0.02..0.02), r.random_range(-0.02..0.02), r.random_range(-0.02..0.02))).collect();
    let constraints = angle_constraints(&start, &mut r);
    SbaProblem::new(cams, start, obs, constraints).unwrap()
}

/// Moves parameter `k` (global layout, pose 0 included) by `h`.
pub fn nudge(problem: &SbaProblem<f64>, k: usize, h: f64) -> SbaProblem<f64> {
    let mut out = problem.clone();
    let pose_params = POSE_DOF * problem.cameras.len();
    if k < pose_params {
        let (cam, c) = (k / POSE_DOF, k % POSE_DOF);
        let mut w = Vector3::zeros();
        let mut t = Vector3::zeros();
        if c < 3 {
            w[c] = h;
        } else {
            t[c - 3] = h;
        }
        out.cameras[cam].pose = problem.cameras[cam].pose.retract(&w, &t);
    } else {
        let j = (k - pose_params) / 3;
        out.points[j][(k - pose_params) % 3] += h;
    }
    out
}

/// Central-difference Jacobian of the reprojection residuals.
pub fn fd_jacobian(problem: &SbaProblem<f64>, h: f64) -> DMatrix<f64> {
    let rows = 2 * problem.observations.len();
    let n = problem.parameter_count();
    let mut j = DMatrix::zeros(rows, n);
    for k in 0..n {
        let d = (residuals(&nudge(problem, k, h)) - residuals(&nudge(problem, k, -h))) / (2.0 * h);
        j.set_column(k, &d);
    }
    j
}

/// Central-difference gradient of the combined objective.
pub fn fd_gradient(problem: &SbaProblem<f64>, angle_weight: f64, h: f64) -> DVector<f64> {
    DVector::from_iterator(
        problem.parameter_count(),
        (0..problem.parameter_count()).map(|k| {
            (objective(&nudge(problem, k, h), angle_weight) - objective(&nudge(problem, k, -h), angle_weight)) / (2.0 * h)
        }),
    )
}

/// Largest entrywise deviation, relative to the largest entry of `reference`.
pub fn max_relative_deviation(a: &DMatrix<f64>, reference: &DMatrix<f64>) -> f64 {
    let scale = reference.amax().max(1e-300);
    (a - reference).amax() / scale
}
