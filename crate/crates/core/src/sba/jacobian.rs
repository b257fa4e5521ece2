use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix2x6, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use super::{segment_angle, SbaProblem, POSE_DOF};
use crate::camera::{CameraView, DEFAULT_BEHIND_PENALTY, MIN_DEPTH};
use crate::scalar::Real;

/// Linearization of one reprojection residual `pi(T_i, p_j) - q_ij`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationBlock<T: Real> {
    pub camera: usize,
    pub point: usize,
    pub residual: Vector2<T>,
    pub d_pose: Matrix2x6<T>,
    pub d_point: Matrix2x3<T>,
}

/// One weighted angle residual `sqrt(w) (theta - theta_ref)` and its gradient
/// with respect to the four segment endpoints `[a0, a1, b0, b1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleRow<T: Real> {
    pub residual: T,
    pub points: [usize; 4],
    pub grads: [Vector3<T>; 4],
}

/// Block-sparse Jacobian; residual `(i, j)` touches only pose `i` and point `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseJacobian<T: Real> {
    pub cameras: usize,
    pub points: usize,
    pub observations: Vec<ObservationBlock<T>>,
    pub angle_rows: Vec<AngleRow<T>>,
}

impl<T: Real> SparseJacobian<T> {
    pub fn rows(&self) -> usize {
        2 * self.observations.len() + self.angle_rows.len()
    }

    pub fn residual_vector(&self) -> DVector<T> {
        let mut e = DVector::zeros(self.rows());
        for (k, b) in self.observations.iter().enumerate() {
            e.fixed_rows_mut::<2>(2 * k).copy_from(&b.residual);
        }
        let base = 2 * self.observations.len();
        for (k, a) in self.angle_rows.iter().enumerate() {
            e[base + k] = a.residual;
        }
        e
    }

    /// Dense matrix over all parameters, pose 0 included.
    pub fn to_dense(&self) -> DMatrix<T> {
        let cols = POSE_DOF * self.cameras + 3 * self.points;
        let pbase = POSE_DOF * self.cameras;
        let mut j = DMatrix::zeros(self.rows(), cols);
        for (k, b) in self.observations.iter().enumerate() {
            j.fixed_view_mut::<2, 6>(2 * k, POSE_DOF * b.camera).copy_from(&b.d_pose);
            j.fixed_view_mut::<2, 3>(2 * k, pbase + 3 * b.point).copy_from(&b.d_point);
        }
        let base = 2 * self.observations.len();
        for (k, a) in self.angle_rows.iter().enumerate() {
            for (p, g) in a.points.iter().zip(&a.grads) {
                for c in 0..3 {
                    j[(base + k, pbase + 3 * p + c)] += g[c];
                }
            }
        }
        j
    }
}

fn skew<T: Real>(v: &Vector3<T>) -> Matrix3<T> {
    Matrix3::new(T::zero(), -v.z, v.y, v.z, T::zero(), -v.x, -v.y, v.x, T::zero())
}

fn observation_block<T: Real>(cam: &CameraView<T>, camera: usize, point: usize, p: &nalgebra::Point3<T>, q: &crate::camera::Pixel<T>) -> ObservationBlock<T> {
    let rp = cam.pose.rotation * p.coords;
    let pc = rp + cam.pose.translation;
    if pc.z <= T::lit(MIN_DEPTH) {
        // Behind the camera: constant penalty of total magnitude DEFAULT_BEHIND_PENALTY.
        let r = T::lit(DEFAULT_BEHIND_PENALTY) / T::lit(2.0).sqrt();
        return ObservationBlock {
            camera,
            point,
            residual: Vector2::new(r, r),
            d_pose: Matrix2x6::zeros(),
            d_point: Matrix2x3::zeros(),
        };
    }
    let k = &cam.intrinsics;
    let iz = T::one() / pc.z;
    let u = k.fx * pc.x * iz + k.cx;
    let v = k.fy * pc.y * iz + k.cy;
    let d_proj = Matrix2x3::new(
        k.fx * iz,
        T::zero(),
        -k.fx * pc.x * iz * iz,
        T::zero(),
        k.fy * iz,
        -k.fy * pc.y * iz * iz,
    );
    // d(pc)/d(omega) = -[R p]_x, d(pc)/d(t) = I, d(pc)/d(p) = R.
    let mut d_pose = Matrix2x6::zeros();
    d_pose.fixed_view_mut::<2, 3>(0, 0).copy_from(&(d_proj * -skew(&rp)));
    d_pose.fixed_view_mut::<2, 3>(0, 3).copy_from(&d_proj);
    ObservationBlock {
        camera,
        point,
        residual: Vector2::new(u - q.u, v - q.v),
        d_pose,
        d_point: d_proj * cam.pose.rotation,
    }
}

/// Reprojection blocks (in observation order) plus weighted angle rows.
pub fn linearize<T: Real>(problem: &SbaProblem<T>, angle_weight: T) -> SparseJacobian<T> {
    let observations = problem
        .observations
        .par_iter()
        .map(|o| observation_block(&problem.cameras[o.camera], o.camera, o.point, &problem.points[o.point], &o.pixel))
        .collect();
    let mut angle_rows = Vec::new();
    if angle_weight > T::zero() {
        let sw = angle_weight.sqrt();
        for (k, c) in problem.angle_constraints.iter().enumerate() {
            let d1 = problem.points[c.a[1]] - problem.points[c.a[0]];
            let d2 = problem.points[c.b[1]] - problem.points[c.b[0]];
            let Some((theta, g1, g2)) = segment_angle(&d1, &d2) else {
                log::warn!("angle constraint {k}: degenerate segment, skipped");
                continue;
            };
            angle_rows.push(AngleRow {
                residual: sw * (theta - c.reference),
                points: [c.a[0], c.a[1], c.b[0], c.b[1]],
                grads: [-g1 * sw, g1 * sw, -g2 * sw, g2 * sw],
            });
        }
    }
    SparseJacobian {
        cameras: problem.cameras.len(),
        points: problem.points.len(),
        observations,
        angle_rows,
    }
}

/// Reprojection-only Jacobian.
pub fn jacobian<T: Real>(problem: &SbaProblem<T>) -> SparseJacobian<T> {
    linearize(problem, T::zero())
}

/// Stacked reprojection residuals in `(camera, point)` order.
pub fn residuals<T: Real>(problem: &SbaProblem<T>) -> DVector<T> {
    jacobian(problem).residual_vector()
}

/// `|E(X)|^2 + angle_weight * angle_penalty`.
pub fn objective<T: Real>(problem: &SbaProblem<T>, angle_weight: T) -> T {
    linearize(problem, angle_weight).residual_vector().norm_squared()
}

/// Gradient of [`objective`] over all parameters (pose 0 included).
pub fn gradient<T: Real>(problem: &SbaProblem<T>, angle_weight: T) -> DVector<T> {
    let j = linearize(problem, angle_weight);
    let g = j.to_dense().transpose() * j.residual_vector();
    g * T::lit(2.0)
}
