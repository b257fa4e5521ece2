//! Skeleton bundle adjustment: joint refinement of camera poses and skeleton
//! endpoints by damped Gauss-Newton (Levenberg-Marquardt) steps with a fixed
//! iteration count and an inter-root angle consistency term.
//!
//! Parameters are ordered `[pose_0, .., pose_{N-1}, point_0, .., point_{M-1}]`;
//! a pose block is `[omega, dt]` where the rotation increment is left-multiplied
//! (`R <- exp(omega) R`). Pose 0 is never updated; an optional
//! [`ScaleAnchor`] also holds one translation component of another camera
//! so the overall scale cannot drift.

mod angle;
mod jacobian;
mod lm;

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraView, Pixel};
use crate::error::{Error, Result};
use crate::scalar::Real;

pub use angle::{angle_penalty, segment_angle, AnglePenalty, MIN_SEGMENT_LENGTH};
pub use jacobian::{gradient, jacobian, linearize, objective, residuals, AngleRow, ObservationBlock, SparseJacobian};
pub use lm::{
    damped_step, lm_step, run_sba, ClassicAdaptive, ConstantLambda, DampingDecision, DampingPolicy,
    DampingPolicyKind, SbaReport, MIN_DIAGONAL,
};

/// Default weight of the angle term, in px² per rad².
pub const DEFAULT_ANGLE_WEIGHT: f64 = 0.1;

pub const DEFAULT_SBA_ITERATIONS: usize = 20;

/// Size of a pose parameter block.
pub const POSE_DOF: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real", deny_unknown_fields)]
pub struct Observation<T: Real> {
    pub camera: usize,
    pub point: usize,
    pub pixel: Pixel<T>,
}

/// Keeps the angle between segments `a` and `b` (point index pairs, start to
/// end) near `reference` radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real", deny_unknown_fields)]
pub struct AngleConstraint<T: Real> {
    pub a: [usize; 2],
    pub b: [usize; 2],
    pub reference: T,
}

/// Translation component `axis` of camera `camera` (≥ 1) kept constant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleAnchor {
    pub camera: usize,
    pub axis: usize,
}

impl ScaleAnchor {
    /// Camera 1, on the axis where its offset from camera 0 is largest in
    /// its own frame. `None` with fewer than two cameras or coincident centers.
    pub fn choose<T: Real>(cameras: &[CameraView<T>]) -> Option<Self> {
        let (c0, c1) = (cameras.first()?, cameras.get(1)?);
        let offset = c1.pose.rotation * (c1.center() - c0.center());
        let axis = offset.iamax();
        (offset[axis].abs() > T::default_epsilon()).then_some(Self { camera: 1, axis })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real", deny_unknown_fields)]
pub struct SbaProblem<T: Real> {
    pub cameras: Vec<CameraView<T>>,
    pub points: Vec<Point3<T>>,
    /// Sorted by `(camera, point)`, at most one per pair.
    pub observations: Vec<Observation<T>>,
    #[serde(default)]
    pub angle_constraints: Vec<AngleConstraint<T>>,
    #[serde(default)]
    pub scale_anchor: Option<ScaleAnchor>,
}

impl<T: Real> SbaProblem<T> {
    /// Builds a problem, sorting observations into `(camera, point)` order.
    pub fn new(
        cameras: Vec<CameraView<T>>,
        points: Vec<Point3<T>>,
        mut observations: Vec<Observation<T>>,
        angle_constraints: Vec<AngleConstraint<T>>,
    ) -> Result<Self> {
        observations.sort_by_key(|o| (o.camera, o.point));
        let p = Self {
            cameras,
            points,
            observations,
            angle_constraints,
            scale_anchor: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_scale_anchor(mut self, anchor: Option<ScaleAnchor>) -> Result<Self> {
        self.scale_anchor = anchor;
        self.validate()?;
        Ok(self)
    }

    /// Index of the anchored component among the free parameters.
    pub fn anchor_index(&self) -> Option<usize> {
        self.scale_anchor.map(|a| POSE_DOF * (a.camera - 1) + 3 + a.axis)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidProblem(m));
        if self.cameras.is_empty() {
            return bad("no cameras".into());
        }
        let mut seen = vec![0usize; self.points.len()];
        for w in self.observations.windows(2) {
            if (w[0].camera, w[0].point) >= (w[1].camera, w[1].point) {
                return bad("observations not strictly sorted by (camera, point)".into());
            }
        }
        for o in &self.observations {
            if o.camera >= self.cameras.len() || o.point >= self.points.len() {
                return bad(format!("observation ({}, {}) out of range", o.camera, o.point));
            }
            if !(o.pixel.u.is_finite() && o.pixel.v.is_finite()) {
                return bad(format!("observation ({}, {}) not finite", o.camera, o.point));
            }
            seen[o.point] += 1;
        }
        if let Some(j) = seen.iter().position(|&n| n < 2) {
            return bad(format!("point {j} is observed in {} view(s), need 2", seen[j]));
        }
        for (k, c) in self.angle_constraints.iter().enumerate() {
            if c.a.iter().chain(&c.b).any(|&i| i >= self.points.len()) {
                return bad(format!("angle constraint {k} references a missing point"));
            }
            if !(c.reference > T::zero() && c.reference < T::PI()) {
                return bad(format!("angle constraint {k} reference outside (0, pi)"));
            }
        }
        if let Some(a) = self.scale_anchor {
            if a.camera == 0 || a.camera >= self.cameras.len() || a.axis >= 3 {
                return bad(format!("scale anchor ({}, {}) out of range", a.camera, a.axis));
            }
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        POSE_DOF * self.cameras.len() + 3 * self.points.len()
    }

    /// Parameter count excluding the gauge-fixed first pose.
    pub fn free_parameter_count(&self) -> usize {
        self.parameter_count() - POSE_DOF
    }

    /// Applies `X <- X - delta` over the free parameters.
    pub fn apply_update(&self, delta: &nalgebra::DVector<T>) -> Self {
        assert_eq!(delta.len(), self.free_parameter_count());
        let mut out = self.clone();
        for (i, cam) in out.cameras.iter_mut().enumerate().skip(1) {
            let o = POSE_DOF * (i - 1);
            let w = -delta.fixed_rows::<3>(o).into_owned();
            let t = -delta.fixed_rows::<3>(o + 3).into_owned();
            cam.pose = cam.pose.retract(&w, &t);
        }
        let base = POSE_DOF * (self.cameras.len() - 1);
        for (j, p) in out.points.iter_mut().enumerate() {
            *p -= delta.fixed_rows::<3>(base + 3 * j).into_owned();
        }
        out
    }

    /// Root-mean-square pixel distance over present observations.
    pub fn rms_reprojection_error(&self) -> T {
        let e = residuals(self);
        if e.is_empty() {
            return T::zero();
        }
        (e.norm_squared() / T::from_usize(self.observations.len()).unwrap()).sqrt()
    }
}
